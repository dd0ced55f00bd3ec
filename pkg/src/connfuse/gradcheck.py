"""Finite-difference checks for every differentiable op and the full model loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .datamodel import Flavor
from .generator import (attention, conv_bold, fuse_mc, gcn_layer, generator_forward_batch,
                        init_attention, init_generator, normalized_adjacency, transformer_f2s,
                        transformer_s2f)
from .heads import (HeadKind, classify, decode_fc, decode_sc, discriminate, init_head, rms_normalize,
                    zscore_normalize)
from .numerics import ParamStore
from .training import (TrainConfig, discriminator_losses, generator_losses, head_input,
                       init_model, loss_adversarial_d, loss_adversarial_g, loss_classification,
                       loss_reconstruction)

SCALES = {
    "small": dict(n=8, d=4, T=30, hidden=32, batch=3),
    "full": dict(n=32, d=16, T=120, hidden=256, batch=4),
}
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _weighted_sum(out: nx.Tensor, weights: np.ndarray) -> nx.Tensor:
    return nx.sum_(out * weights)


def _sc(rng, n: int, batch: int | None = None) -> np.ndarray:
    shape = (n, n) if batch is None else (batch, n, n)
    a = rng.uniform(0.0, 1.0, size=shape)
    a = np.triu(a, 1)
    a = a + np.swapaxes(a, -1, -2)
    return a


def _fc(rng, n: int, batch: int) -> np.ndarray:
    x = rng.standard_normal((batch, n, 3 * n))
    x -= x.mean(axis=-1, keepdims=True)
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    r = x @ np.swapaxes(x, -1, -2)
    return np.clip((r + np.swapaxes(r, -1, -2)) / 2, -1, 1)


def build_cases(scale: str = "small", seed: int = 0) -> dict[str, tuple[Callable, ParamStore]]:
    """Map op name -> (scalar forward closure, parameter store)."""
    cfg = SCALES[scale]
    n, d, T, hidden, B = cfg["n"], cfg["d"], cfg["T"], cfg["hidden"], cfg["batch"]
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable, ParamStore]] = {}

    def elementwise(name, fn, shape=(6, 7), scale_=2.0):
        s = ParamStore()
        x = s.add("x", rng.uniform(-scale_, scale_, size=shape))
        w = rng.standard_normal(shape)
        cases[name] = (lambda: _weighted_sum(fn(x), w), s)

    s = ParamStore()
    a, b = s.add("A", rng.standard_normal((5, 4))), s.add("B", rng.standard_normal((4, 3)))
    wm = rng.standard_normal((5, 3))
    cases["matmul"] = (lambda: _weighted_sum(nx.matmul(a, b), wm), s)

    elementwise("softmax_rows", nx.softmax_rows)
    elementwise("relu", nx.relu)
    elementwise("softplus", nx.softplus)
    elementwise("tanh", nx.tanh)
    elementwise("sigmoid", nx.sigmoid)
    elementwise("l1_mean", nx.l1_mean)

    for mode in ("valid", "same"):
        s = ParamStore()
        x = s.add("x", rng.standard_normal((2, 4, T)))
        k = s.add("kernel", rng.standard_normal(10) / 3)
        kb = s.add("bias", rng.standard_normal(()))
        out_len = T - 9 if mode == "valid" else T
        wc = rng.standard_normal((2, 4, out_len))
        cases[f"conv1d_{mode}"] = (lambda x=x, k=k, kb=kb, wc=wc, mode=mode:
                                   _weighted_sum(nx.conv1d(x, k, kb, mode), wc), s)

    s = ParamStore()
    logits = s.add("logits", rng.standard_normal((6, 4)))
    target = rng.integers(0, 4, size=6)
    cases["cross_entropy"] = (lambda: nx.cross_entropy(logits, target), s)

    # generator pieces
    s = ParamStore()
    X = s.add("X", rng.standard_normal((n, d)))
    att = init_attention(s, "att", d, n, 32, 32, rng, 0.1)
    wa = rng.standard_normal((n, 32))
    cases["attention"] = (lambda: _weighted_sum(attention(X, att), wa), s)

    s = ParamStore()
    Ft, St = s.add("F_tilde", rng.standard_normal((n, d))), s.add("S_tilde", _sc(rng, n))
    p1 = init_attention(s, "f2s", d, n, 32, 32, rng, 0.1)
    w1 = rng.standard_normal((n, n))
    cases["transformer_f2s"] = (lambda: _weighted_sum(transformer_f2s(Ft, St, p1), w1), s)

    s = ParamStore()
    Ft2, St2 = s.add("F_tilde", rng.standard_normal((n, d))), s.add("S_tilde", _sc(rng, n))
    p2 = init_attention(s, "s2f", n, d, 32, 32, rng, 0.1)
    w2 = rng.standard_normal((n, d))
    cases["transformer_s2f"] = (lambda: _weighted_sum(transformer_s2f(St2, Ft2, p2), w2), s)

    s = ParamStore()
    A = _sc(rng, n)
    H, Wg = s.add("H", _sc(rng, n)), s.add("W", rng.uniform(-0.5, 0.5, (n, n)))
    w3 = rng.standard_normal((n, n))
    cases["gcn_layer"] = (lambda: _weighted_sum(gcn_layer(H, A, Wg), w3), s)

    s = ParamStore()
    stream = rng.standard_normal((4, 30))
    kc = s.add("kernel", rng.uniform(-0.3, 0.3, 10))
    kcb = s.add("bias", rng.uniform(-0.3, 0.3, ()))
    pw, pb = s.add("proj_weight", rng.uniform(-0.2, 0.2, (21, 8))), s.add("proj_bias", rng.uniform(-0.2, 0.2, 8))
    w4 = rng.standard_normal((4, 8))
    cases["conv_bold"] = (lambda: _weighted_sum(conv_bold(stream, kc, kcb, "valid", pw, pb), w4), s)

    s = ParamStore()
    S, F = s.add("S", rng.standard_normal((n, n)) / np.sqrt(n)), s.add("F", rng.standard_normal((n, d)) / np.sqrt(d))
    w5 = rng.standard_normal((n, n))
    cases["fuse_mc"] = (lambda: _weighted_sum(fuse_mc(S, F), w5), s)

    bold = rng.standard_normal((B, n, T))
    sc = _sc(rng, n, B)
    fc = _fc(rng, n, B)
    stages = rng.integers(0, 4, size=B)

    s = ParamStore()
    gen = init_generator(n, T, d, 32, 32, 0.1, rng=rng, store=s)
    _condition_generator(gen, bold, sc)
    w6 = rng.standard_normal((B, n, n))
    cases["generator_forward"] = (lambda: _weighted_sum(rms_normalize(generator_forward_batch(bold, sc, gen)), w6), s)

    def head_case(name, kind, fn, weights_shape):
        s = ParamStore()
        Sx = s.add("S", rng.standard_normal((B, n, n)) / np.sqrt(n))
        Fx = s.add("F", rng.standard_normal((B, n, d)) / np.sqrt(d))
        p = init_head(kind, n, (hidden,), rng=rng, store=s, zero_output=False)
        w = rng.standard_normal(weights_shape)

        def forward():
            return _weighted_sum(fn(zscore_normalize(fuse_mc(Sx, Fx)), p), w)
        cases[name] = (forward, s)

    head_case("decode_sc", HeadKind.DECODER_SC, decode_sc, (B, n, n))
    head_case("decode_fc", HeadKind.DECODER_FC, decode_fc, (B, n, n))
    head_case("classify", HeadKind.CLASSIFIER, classify, (B, 4))

    for tag, kind, flavor, real in (("sc", HeadKind.DISCR_SC, Flavor.STRUCTURAL, sc),
                                    ("fc", HeadKind.DISCR_FC, Flavor.FUNCTIONAL, fc)):
        s = ParamStore()
        conn = s.add("conn", real.copy())
        p = init_head(kind, n, (hidden,), rng=rng, store=s)
        w = rng.standard_normal(B)
        cases[f"discriminate_{tag}"] = (
            lambda conn=conn, p=p, flavor=flavor, w=w: _weighted_sum(discriminate(conn, p, flavor), w), s)

    # losses
    s = ParamStore()
    pd = init_head(HeadKind.DISCR_SC, n, (hidden,), rng=rng, store=s)
    fake = _sc(rng, n, B)
    cases["loss_adversarial_d"] = (lambda: loss_adversarial_d(sc, fake, pd), s)

    config = TrainConfig(d=d, hidden=hidden, seed=seed)
    model = init_model(config, n, T)
    _condition_generator(model.gen, bold, sc)
    # a zero classifier output layer would hide its hidden-layer gradients
    last = model.g_store["classifier.layer1.weight"]
    last.data[...] = rng.standard_normal(last.data.shape) / np.sqrt(hidden)
    merged = _merged(model)
    batch = {"bold": bold, "sc": sc, "fc": fc, "stage": stages}

    def g_adv():
        mc = generator_forward_batch(bold, sc, model.gen)
        sc_fake = decode_sc(head_input(model, mc), model.dec_sc)
        return loss_adversarial_g(sc_fake, model.disc_sc)
    cases["loss_adversarial_g"] = (g_adv, merged)

    s = ParamStore()
    Sx, Fx = s.add("S", rng.standard_normal((B, n, n)) / np.sqrt(n)), s.add("F", rng.standard_normal((B, n, d)) / np.sqrt(d))
    pc = init_head(HeadKind.CLASSIFIER, n, (hidden,), rng=rng, store=s, zero_output=False)
    cases["loss_classification"] = (lambda: loss_classification(zscore_normalize(fuse_mc(Sx, Fx)), stages, pc), s)

    s = ParamStore()
    dec = s.add("decoded", _sc(rng, n, B) + 0.05)
    cases["loss_reconstruction"] = (lambda: loss_reconstruction(dec, sc), s)

    # the D loss treats fakes as constants, so they are frozen at the check point
    z0 = head_input(model, generator_forward_batch(bold, sc, model.gen))
    fakes = (decode_sc(z0, model.dec_sc).detach(), decode_fc(z0, model.dec_fc).detach())

    def total():
        loss, _, _ = generator_losses(model, batch, config)
        d_sc, d_fc = discriminator_losses(model, batch, *fakes)
        return loss + d_sc + d_fc
    cases["full_model_total_loss"] = (total, merged)
    return cases


def _condition_generator(gen, bold, sc, x_std: float = 10.0) -> None:
    """Move the generator to a well-conditioned check point, block by block.

    At init the block activations are ~0.02 and attention scores are nearly
    uniform, so many attention-weight gradients fall below the roundoff of a
    central difference at h=1e-5. Rescaling each conv kernel and GCN weight so
    their outputs have std ``x_std``, then shrinking W_q/W_k to unit score std
    and W_v to unit value std, lifts those gradients by about ``x_std`` without
    touching any op.
    """
    a_norm = normalized_adjacency(sc)
    F, S = nx.Tensor(np.asarray(bold, dtype=float)), nx.Tensor(np.asarray(sc, dtype=float))
    for b, blk in enumerate(gen.blocks):
        def conv():
            if b == 0:
                return conv_bold(F, blk.kernel, blk.kernel_bias, "valid", gen.embed_weight, gen.embed_bias)
            return conv_bold(F, blk.kernel, blk.kernel_bias, "same")
        for _ in range(3):  # the block-1 projection bias makes this only nearly homogeneous
            c = x_std / np.std(conv().data)
            blk.kernel.data *= c
            blk.kernel_bias.data *= c
        F_t = conv()
        blk.W_gcn.data *= x_std / np.std(gcn_layer(S, None, blk.W_gcn, a_norm=a_norm).data)
        S_t = gcn_layer(S, None, blk.W_gcn, a_norm=a_norm)
        for X, p in ((F_t.data, blk.f2s), (S_t.data, blk.s2f)):
            scores = (X @ p.W_q.data) @ np.swapaxes(X @ p.W_k.data, -1, -2) / np.sqrt(p.W_q.shape[1])
            c = np.sqrt(1.0 / np.std(scores))
            p.W_q.data *= c
            p.W_k.data *= c
            p.W_v.data /= np.std(X @ p.W_v.data @ p.fc_weight.data)
        S = transformer_f2s(F_t, S_t, blk.f2s)
        F = transformer_s2f(S_t, F_t, blk.s2f)


def _merged(model) -> ParamStore:
    s = ParamStore()
    s.params = {**model.g_store.params, **model.d_store.params}
    return s


def run_suite(scale: str = "small", n_probes: int = 100, seed: int = 0,
              only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, (forward, store) in build_cases(scale, seed).items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        err = nx.grad_check(forward, store, n_probes=n_probes, rng=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
