"""Cross-modal transformer generator.

Three blocks, each: temporal CNN on the functional stream, GCN on the
structural stream, then an F2S transformer (functional queries, output added to
the structural stream) and an S2F transformer (the mirror). The generator
output is MC = S F F^T S^T.

All forward functions accept arrays with leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .datamodel import Subject
from .numerics import ParamStore, ShapeError, Tensor

KERNEL_WIDTH = 10
N_BLOCKS = 3


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    fc_weight: Tensor
    fc_bias: Tensor
    lam: float = 0.1

    def __post_init__(self):
        if self.W_q.shape != self.W_k.shape:
            raise ShapeError(f"W_q {self.W_q.shape} and W_k {self.W_k.shape} differ")
        if self.W_v.shape[0] != self.W_q.shape[0]:
            raise ShapeError("W_v input dim differs from W_q")
        if self.fc_weight.shape[0] != self.W_v.shape[1] or self.fc_bias.shape != self.fc_weight.shape[1:]:
            raise ShapeError("affine layer does not chain onto W_v")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")

    @property
    def d_in(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_out(self) -> int:
        return self.fc_weight.shape[1]


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_attention(store: ParamStore, prefix: str, d_x: int, d_y: int, d_k: int, d_v: int,
                   rng: np.random.Generator, lam: float) -> AttentionParams:
    return AttentionParams(
        W_q=store.add(f"{prefix}.W_q", fan_in_uniform(rng, (d_x, d_k), d_x)),
        W_k=store.add(f"{prefix}.W_k", fan_in_uniform(rng, (d_x, d_k), d_x)),
        W_v=store.add(f"{prefix}.W_v", fan_in_uniform(rng, (d_x, d_v), d_x)),
        fc_weight=store.add(f"{prefix}.fc_weight", fan_in_uniform(rng, (d_v, d_y), d_v)),
        fc_bias=store.add(f"{prefix}.fc_bias", fan_in_uniform(rng, (d_y,), d_v)),
        lam=lam,
    )


@dataclass
class Block:
    kernel: Tensor
    kernel_bias: Tensor
    W_gcn: Tensor
    f2s: AttentionParams
    s2f: AttentionParams


@dataclass
class GeneratorParams:
    n: int
    T: int
    d: int
    d_k: int
    d_v: int
    lam: float
    store: ParamStore
    blocks: list
    embed_weight: Tensor
    embed_bias: Tensor
    prefix: str = "gen"

    def names(self) -> list[str]:
        return self.store.names(self.prefix + ".")


def init_generator(n: int, T: int, d: int = 16, d_k: int = 32, d_v: int = 32, lam: float = 0.1,
                   rng=0, store: ParamStore | None = None, prefix: str = "gen") -> GeneratorParams:
    if T < KERNEL_WIDTH:
        raise ShapeError(f"need T >= {KERNEL_WIDTH}, got {T}")
    rng = np.random.default_rng(rng)
    store = ParamStore() if store is None else store
    blocks = []
    for b in range(1, N_BLOCKS + 1):
        p = f"{prefix}.block{b}"
        blocks.append(Block(
            kernel=store.add(f"{p}.conv_kernel", fan_in_uniform(rng, (KERNEL_WIDTH,), KERNEL_WIDTH)),
            # zero bias: a random negative bias can silence the ReLU over the small
            # block-2/3 features for every subject, and it never recovers
            kernel_bias=store.add(f"{p}.conv_bias", np.zeros(())),
            W_gcn=store.add(f"{p}.W_gcn", fan_in_uniform(rng, (n, n), n)),
            f2s=init_attention(store, f"{p}.f2s", d, n, d_k, d_v, rng, lam),
            s2f=init_attention(store, f"{p}.s2f", n, d, d_k, d_v, rng, lam),
        ))
    l_valid = T - KERNEL_WIDTH + 1
    embed_w = store.add(f"{prefix}.embed_weight", fan_in_uniform(rng, (l_valid, d), l_valid))
    embed_b = store.add(f"{prefix}.embed_bias", fan_in_uniform(rng, (d,), l_valid))
    return GeneratorParams(n, T, d, d_k, d_v, lam, store, blocks, embed_w, embed_b, prefix)


def attention(X, p: AttentionParams) -> Tensor:
    """softmax((X W_q)(X W_k)^T / sqrt(d_k)) (X W_v)."""
    X = nx.as_tensor(X)
    if X.shape[-1] != p.d_in:
        raise ShapeError(f"attention input width {X.shape[-1]} != W_q rows {p.d_in}")
    q = X @ p.W_q
    k = X @ p.W_k
    v = X @ p.W_v
    scores = (q @ k.T) * (1.0 / math.sqrt(p.W_q.shape[1]))
    return nx.softmax_rows(scores) @ v


def _cross_transform(X, Y, p: AttentionParams) -> Tensor:
    X, Y = nx.as_tensor(X), nx.as_tensor(Y)
    if Y.shape[-1] != p.d_out or X.shape[-2] != Y.shape[-2]:
        raise ShapeError(f"target stream {Y.shape} incompatible with input {X.shape} / d_Y={p.d_out}")
    out = attention(X, p) @ p.fc_weight + p.fc_bias
    if p.lam:
        out = out + Y * p.lam
    return out


def transformer_f2s(F_tilde, S_tilde, p: AttentionParams) -> Tensor:
    """Functional features attend; result is mapped into the structural (n×n) stream."""
    return _cross_transform(F_tilde, S_tilde, p)


def transformer_s2f(S_tilde, F_tilde, p: AttentionParams) -> Tensor:
    """Structural features attend; result is mapped into the functional (n×d) stream."""
    return _cross_transform(S_tilde, F_tilde, p)


def normalized_adjacency(A: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2, batched over leading axes."""
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    a_hat = A + np.eye(n)
    deg = a_hat.sum(axis=-1)
    inv = 1.0 / np.sqrt(deg)
    return a_hat * inv[..., :, None] * inv[..., None, :]


def gcn_layer(H, A, W: Tensor, a_norm: np.ndarray | None = None) -> Tensor:
    """ReLU(A_hat H W). ``a_norm`` lets callers reuse a precomputed A_hat."""
    if a_norm is None:
        a = A.values if hasattr(A, "values") else A
        a_norm = normalized_adjacency(a)
    H = nx.as_tensor(H)
    if H.shape[-2] != a_norm.shape[-1] or H.shape[-1] != W.shape[0]:
        raise ShapeError(f"gcn shapes disagree: H {H.shape}, A {a_norm.shape}, W {W.shape}")
    return nx.relu(nx.as_tensor(a_norm) @ H @ W)


def conv_bold(stream, kernel: Tensor, bias: Tensor | None = None, mode: str = "same",
              proj_weight: Tensor | None = None, proj_bias: Tensor | None = None) -> Tensor:
    """Per-ROI temporal convolution + ReLU, optionally followed by a width projection."""
    out = nx.relu(nx.conv1d(nx.as_tensor(stream), kernel, bias, mode=mode))
    if proj_weight is not None:
        out = out @ proj_weight
        if proj_bias is not None:
            out = out + proj_bias
    return out


def fuse_mc(S, F) -> Tensor:
    """MC = S F F^T S^T, symmetrized to absorb roundoff."""
    S, F = nx.as_tensor(S), nx.as_tensor(F)
    if S.shape[-1] != F.shape[-2]:
        raise ShapeError(f"fuse_mc shapes disagree: S {S.shape}, F {F.shape}")
    P = S @ F
    M = P @ P.T
    return (M + M.T) * 0.5


def generator_forward_batch(bold, sc, params: GeneratorParams) -> Tensor:
    """MC for a batch: bold (B,n,T), sc (B,n,n) -> (B,n,n)."""
    bold = np.asarray(bold, dtype=params.store.dtype)
    sc = np.asarray(sc, dtype=params.store.dtype)
    if bold.shape[-2:] != (params.n, params.T) or sc.shape[-2:] != (params.n, params.n):
        raise ShapeError(
            f"generator built for n={params.n}, T={params.T}; got bold {bold.shape}, sc {sc.shape}")
    a_norm = normalized_adjacency(sc)
    F: Tensor = Tensor(bold)
    S: Tensor = Tensor(sc)
    for b, blk in enumerate(params.blocks):
        if b == 0:
            F_t = conv_bold(F, blk.kernel, blk.kernel_bias, "valid", params.embed_weight, params.embed_bias)
        else:
            F_t = conv_bold(F, blk.kernel, blk.kernel_bias, "same")
        S_t = gcn_layer(S, None, blk.W_gcn, a_norm=a_norm)
        S = transformer_f2s(F_t, S_t, blk.f2s)
        F = transformer_s2f(S_t, F_t, blk.s2f)
    return fuse_mc(S, F)


def generator_forward(subject: Subject, params: GeneratorParams) -> Tensor:
    return generator_forward_batch(subject.bold, subject.sc_emp.values, params)


def check_mc(mc: np.ndarray, d: int | None = None, sym_tol: float = 1e-9, psd_tol: float = 1e-8) -> None:
    """Raise if ``mc`` (n×n) is not symmetric PSD with rank <= d."""
    if np.max(np.abs(mc - mc.T), initial=0.0) > sym_tol * max(1.0, np.abs(mc).max()):
        raise ValueError("MC is not symmetric")
    w = np.linalg.eigvalsh((mc + mc.T) / 2)
    top = max(abs(w[-1]), abs(w[0]))
    if w[0] < -psd_tol * top:
        raise ValueError(f"MC is not PSD: min eigenvalue {w[0]:.3g} vs max {top:.3g}")
    if d is not None and d < mc.shape[0]:
        sv = np.linalg.svd(mc, compute_uv=False)
        if sv[d] > psd_tol * sv[0]:
            raise ValueError(f"MC rank exceeds {d}")
