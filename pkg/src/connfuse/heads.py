"""MLP heads: two decoders, two discriminators and the stage classifier."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .datamodel import ConnMatrix, Flavor, Stage, triu_indices
from .generator import fan_in_uniform
from .numerics import ParamStore, ShapeError, Tensor

N_STAGES = len(Stage)


class HeadKind(enum.Enum):
    DECODER_SC = "dec_sc"
    DECODER_FC = "dec_fc"
    DISCR_SC = "disc_sc"
    DISCR_FC = "disc_fc"
    CLASSIFIER = "classifier"


def _dims(kind: HeadKind, n: int) -> tuple[int, int]:
    incl = n * (n + 1) // 2
    strict = n * (n - 1) // 2
    return {
        HeadKind.DECODER_SC: (incl, strict),
        HeadKind.DECODER_FC: (incl, strict),
        HeadKind.DISCR_SC: (strict, 1),
        HeadKind.DISCR_FC: (strict, 1),
        HeadKind.CLASSIFIER: (incl, N_STAGES),
    }[kind]


_DISCR_FLAVOR = {HeadKind.DISCR_SC: Flavor.STRUCTURAL, HeadKind.DISCR_FC: Flavor.FUNCTIONAL}


@dataclass
class HeadParams:
    kind: HeadKind
    n: int
    layers: list  # [(weight, bias)], ReLU between layers, none after the last

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def names(self) -> list[str]:
        return [t.name for layer in self.layers for t in layer]


def init_head(kind: HeadKind, n: int, hidden=(256,), rng=0, store: ParamStore | None = None,
              prefix: str | None = None, zero_output: bool | None = None) -> HeadParams:
    """Fan-in uniform MLP.

    ``zero_output`` (default: classifier only) zeroes the last layer so the
    head starts at the uniform prediction instead of a random one that is
    the same for every subject.
    """
    rng = np.random.default_rng(rng)
    if zero_output is None:
        zero_output = kind is HeadKind.CLASSIFIER
    store = ParamStore() if store is None else store
    prefix = kind.value if prefix is None else prefix
    d_in, d_out = _dims(kind, n)
    sizes = [d_in, *hidden, d_out]
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        w = store.add(f"{prefix}.layer{i}.weight", fan_in_uniform(rng, (a, b), a))
        bias = store.add(f"{prefix}.layer{i}.bias", fan_in_uniform(rng, (b,), a))
        layers.append((w, bias))
    if zero_output:
        for t in layers[-1]:
            t.data[...] = 0.0
    return HeadParams(kind, n, layers)


def rms_normalize(mc, eps: float = 1e-30) -> Tensor:
    """Divide each n×n matrix by its root-mean-square entry."""
    mc = nx.as_tensor(mc)
    ms = nx.mean(mc * mc, axis=(-2, -1), keepdims=True)
    return mc / nx.sqrt(ms + eps)


def zscore_normalize(mc, eps: float = 1e-30) -> Tensor:
    """Subtract each n×n matrix's mean entry and divide by the entries' std.

    The shared offset carries no subject information and, left in, swamps the
    small between-subject differences the heads need to see.
    """
    mc = nx.as_tensor(mc)
    centred = mc - nx.mean(mc, axis=(-2, -1), keepdims=True)
    var = nx.mean(centred * centred, axis=(-2, -1), keepdims=True)
    return centred / nx.sqrt(var + eps)


def mlp(x: Tensor, p: HeadParams) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"{p.kind.value}: input width {x.shape[-1]} != {p.in_dim}")
    for i, (w, b) in enumerate(p.layers):
        x = x @ w + b
        if i < len(p.layers) - 1:
            x = nx.relu(x)
    return x


def _as_batch(x) -> tuple[Tensor, bool]:
    t = nx.as_tensor(x.values if isinstance(x, ConnMatrix) else x)
    if t.ndim == 2:
        return nx.reshape(t, (1,) + t.shape), True
    return t, False


def upper_features(mc) -> np.ndarray:
    """Inclusive upper-triangle vectors of (a batch of) MC, as the decoders/classifier read them."""
    m = np.asarray(mc.data if isinstance(mc, Tensor) else mc)
    rows, cols = triu_indices(m.shape[-1], True)
    return m[..., rows, cols]


def _upper(m: Tensor, include_diag: bool) -> Tensor:
    rows, cols = triu_indices(m.shape[-1], include_diag)
    return nx.take_pairs(m, rows, cols)


def _expect(p: HeadParams, kind: HeadKind) -> None:
    if p.kind is not kind:
        raise ValueError(f"expected {kind.value} head, got {p.kind.value}")


def _decode(mc, p: HeadParams, activation, diag: float) -> Tensor:
    mc, single = _as_batch(mc)
    if mc.shape[-1] != p.n:
        raise ShapeError(f"{p.kind.value} built for n={p.n}, got MC {mc.shape}")
    v = activation(mlp(_upper(mc, True), p))
    rows, cols = triu_indices(p.n, False)
    out = nx.scatter_symmetric(v, p.n, rows, cols, diag)
    return nx.reshape(out, out.shape[1:]) if single else out


def decode_sc(mc, p: HeadParams) -> Tensor:
    """MC -> non-negative symmetric SC with zero diagonal."""
    _expect(p, HeadKind.DECODER_SC)
    return _decode(mc, p, nx.softplus, 0.0)


def decode_fc(mc, p: HeadParams) -> Tensor:
    """MC -> symmetric FC in [-1, 1] with unit diagonal."""
    _expect(p, HeadKind.DECODER_FC)
    return _decode(mc, p, nx.tanh, 1.0)


def discriminator_logit(conn, p: HeadParams, flavor: Flavor | None = None) -> Tensor:
    if p.kind not in _DISCR_FLAVOR:
        raise ValueError(f"{p.kind.value} is not a discriminator")
    if isinstance(conn, ConnMatrix):
        flavor = conn.flavor
    if flavor is not None and flavor is not _DISCR_FLAVOR[p.kind]:
        raise ValueError(f"{p.kind.value} cannot judge {flavor.value} connectivity")
    x, single = _as_batch(conn)
    z = nx.reshape(mlp(_upper(x, False), p), x.shape[:-2])
    return nx.reshape(z, ()) if single else z


def discriminate(conn, p: HeadParams, flavor: Flavor | None = None) -> Tensor:
    """Probability in (0, 1) that ``conn`` is empirical rather than decoded."""
    return nx.sigmoid(discriminator_logit(conn, p, flavor))


def classifier_logits(mc, p: HeadParams) -> Tensor:
    _expect(p, HeadKind.CLASSIFIER)
    x, single = _as_batch(mc)
    z = nx.reshape(mlp(_upper(x, True), p), x.shape[:-2] + (N_STAGES,))
    return nx.reshape(z, (N_STAGES,)) if single else z


def classify(mc, p: HeadParams) -> Tensor:
    """Stage probabilities (NC, EMCI, LMCI, AD)."""
    return nx.softmax_rows(classifier_logits(mc, p))
