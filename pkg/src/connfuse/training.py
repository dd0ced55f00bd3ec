"""Hybrid loss and the alternating adversarial training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .datamodel import ConnMatrix, Flavor, Stage, stack_cohort, triu_indices
from .generator import GeneratorParams, generator_forward_batch, init_generator
from .heads import (HeadKind, HeadParams, classifier_logits, decode_fc, decode_sc,
                    discriminator_logit, init_head, rms_normalize, zscore_normalize)
from .numerics import ParamStore, Tensor, adam_step

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("loss_d_sc", "loss_d_fc", "loss_g_sc", "loss_g_fc", "loss_cls",
                "loss_rcs_sc", "loss_rcs_fc", "loss_total")
HISTORY_COLUMNS = ("epoch",) + LOSS_COLUMNS + ("train_acc",)


class NumericalFailure(FloatingPointError):
    def __init__(self, epoch: int, batch: int, component: str, value: float):
        self.epoch, self.batch, self.component, self.value = epoch, batch, component, value
        super().__init__(f"non-finite {component}={value} at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lambda_mix: float = 0.1
    w_adv: float = 0.03
    w_cls: float = 1.0
    w_rcs: float = 10.0
    d: int = 16
    d_k: int = 32
    d_v: int = 32
    hidden: int = 256
    mc_norm: str = "zscore"
    adversarial_form: str = "non_saturating"
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    metrics_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if min(self.w_adv, self.w_cls, self.w_rcs) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.lambda_mix <= 1:
            raise ValueError("lambda_mix must be in [0, 1]")
        if self.adversarial_form not in ("non_saturating", "minimax"):
            raise ValueError(f"unknown adversarial_form {self.adversarial_form!r}")
        if self.mc_norm not in ("zscore", "rms", "none"):
            raise ValueError(f"mc_norm must be 'zscore', 'rms' or 'none', got {self.mc_norm!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> TrainConfig:
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class Model:
    gen: GeneratorParams
    dec_sc: HeadParams
    dec_fc: HeadParams
    disc_sc: HeadParams
    disc_fc: HeadParams
    classifier: HeadParams
    g_store: ParamStore  # generator, decoders, classifier
    d_store: ParamStore  # discriminators
    mc_norm: str = "zscore"

    @property
    def n(self) -> int:
        return self.gen.n

    @property
    def T(self) -> int:
        return self.gen.T


def init_model(config: TrainConfig, n: int, T: int) -> Model:
    dtype = np.dtype(config.dtype)
    seeds = np.random.SeedSequence(config.seed).spawn(6)
    g_store, d_store = ParamStore(dtype), ParamStore(dtype)
    hidden = (config.hidden,)
    gen = init_generator(n, T, config.d, config.d_k, config.d_v, config.lambda_mix,
                         rng=np.random.default_rng(seeds[0]), store=g_store)
    heads = {}
    for seed, kind in zip(seeds[1:], HeadKind):
        store = d_store if kind in (HeadKind.DISCR_SC, HeadKind.DISCR_FC) else g_store
        heads[kind] = init_head(kind, n, hidden, rng=np.random.default_rng(seed), store=store)
    return Model(gen, heads[HeadKind.DECODER_SC], heads[HeadKind.DECODER_FC],
                 heads[HeadKind.DISCR_SC], heads[HeadKind.DISCR_FC], heads[HeadKind.CLASSIFIER],
                 g_store, d_store, config.mc_norm)


def head_input(model: Model, mc) -> Tensor:
    """What the decoders and the classifier see of MC."""
    if model.mc_norm == "rms":
        return rms_normalize(mc)
    if model.mc_norm == "zscore":
        return zscore_normalize(mc)
    return nx.as_tensor(mc)


# ---------------------------------------------------------------- losses

def _values(x):
    if isinstance(x, ConnMatrix):
        return x.values
    return x


def _check_flavor(x, D: HeadParams) -> None:
    want = Flavor.STRUCTURAL if D.kind is HeadKind.DISCR_SC else Flavor.FUNCTIONAL
    if isinstance(x, ConnMatrix) and x.flavor is not want:
        raise ValueError(f"{D.kind.value} got {x.flavor.value} connectivity")


def loss_adversarial_d(real, fake, D: HeadParams) -> Tensor:
    """-[log D(real) + log(1 - D(fake))], batch mean; ``fake`` is detached."""
    _check_flavor(real, D)
    _check_flavor(fake, D)
    fake = _values(fake)
    fake = fake.detach() if isinstance(fake, Tensor) else fake
    z_real = discriminator_logit(_values(real), D)
    z_fake = discriminator_logit(fake, D)
    return nx.mul(nx.add(nx.mean(nx.log_sigmoid(z_real)), nx.mean(nx.log_sigmoid(-z_fake))), -1.0)


def loss_adversarial_g(fake, D: HeadParams, form: str = "non_saturating") -> Tensor:
    """Generator side: -log D(fake) (default) or the literal log(1 - D(fake))."""
    _check_flavor(fake, D)
    z = discriminator_logit(_values(fake), D)
    if form == "non_saturating":
        return -nx.mean(nx.log_sigmoid(z))
    if form == "minimax":
        return nx.mean(nx.log_sigmoid(-z))
    raise ValueError(f"unknown adversarial form {form!r}")


def loss_classification(mc, stage, C: HeadParams) -> Tensor:
    """Cross-entropy of the classifier on MC against integer stage label(s)."""
    target = np.asarray([int(s) for s in stage] if np.ndim(stage) else int(stage), dtype=np.int64)
    return nx.cross_entropy(classifier_logits(mc, C), target)


def loss_reconstruction(decoded, empirical) -> Tensor:
    """Mean absolute difference over ROI pairs i < j (and over the batch)."""
    decoded = nx.as_tensor(_values(decoded))
    empirical = np.asarray(_values(empirical), dtype=decoded.data.dtype)
    rows, cols = triu_indices(decoded.shape[-1], False)
    diff = nx.take_pairs(decoded, rows, cols) - empirical[..., rows, cols]
    return nx.l1_mean(diff)


def generator_losses(model: Model, batch: dict, config: TrainConfig, mc: Tensor | None = None,
                     sc_fake: Tensor | None = None, fc_fake: Tensor | None = None):
    """G-phase hybrid loss for a batch; returns (total, parts, logits)."""
    if mc is None:
        mc = generator_forward_batch(batch["bold"], batch["sc"], model.gen)
    z = head_input(model, mc)
    if sc_fake is None:
        sc_fake = decode_sc(z, model.dec_sc)
    if fc_fake is None:
        fc_fake = decode_fc(z, model.dec_fc)
    g_sc = loss_adversarial_g(sc_fake, model.disc_sc, config.adversarial_form)
    g_fc = loss_adversarial_g(fc_fake, model.disc_fc, config.adversarial_form)
    logits = classifier_logits(z, model.classifier)
    cls = nx.cross_entropy(logits, batch["stage"])
    rcs_sc = loss_reconstruction(sc_fake, batch["sc"])
    rcs_fc = loss_reconstruction(fc_fake, batch["fc"])
    total = ((g_sc + g_fc) * config.w_adv + cls * config.w_cls + (rcs_sc + rcs_fc) * config.w_rcs)
    return total, (g_sc, g_fc, cls, rcs_sc, rcs_fc), logits


def discriminator_losses(model: Model, batch: dict, sc_fake, fc_fake):
    d_sc = loss_adversarial_d(batch["sc"], sc_fake, model.disc_sc)
    d_fc = loss_adversarial_d(batch["fc"], fc_fake, model.disc_fc)
    return d_sc, d_fc


# ---------------------------------------------------------------- loop

@dataclass
class TrainState:
    model: Model
    config: TrainConfig
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, n: int, T: int) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(7)[6])
    return TrainState(init_model(config, n, T), config, 0, rng, [])


def _batch(arrays: dict, idx: np.ndarray, dtype) -> dict:
    return {k: (v[idx] if k == "stage" else v[idx].astype(dtype, copy=False)) for k, v in arrays.items()}


def _finite_or_abort(epoch: int, b: int, named: dict) -> None:
    for k, v in named.items():
        if not math.isfinite(v):
            raise NumericalFailure(epoch, b, k, v)


def train_epoch(state: TrainState, arrays: dict) -> dict:
    cfg, model = state.config, state.model
    n_sub = len(arrays["stage"])
    order = state.rng.permutation(n_sub)
    epoch = state.epoch + 1
    sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
    adam_kw = dict(lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    correct = _run_batches(state, arrays, order, epoch, sums, adam_kw)
    state.epoch = epoch
    out = {"epoch": epoch, **{k: v / n_sub for k, v in sums.items()}, "train_acc": correct / n_sub}
    state.history.append(out)
    return out


def _run_batches(state: TrainState, arrays: dict, order, epoch: int, sums: dict, adam_kw: dict) -> int:
    cfg, model = state.config, state.model
    dtype = model.g_store.dtype
    correct = 0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        batch = _batch(arrays, idx, dtype)
        mc = generator_forward_batch(batch["bold"], batch["sc"], model.gen)
        z = head_input(model, mc)
        sc_fake = decode_sc(z, model.dec_sc)
        fc_fake = decode_fc(z, model.dec_fc)

        model.d_store.zero_grad()
        d_sc, d_fc = discriminator_losses(model, batch, sc_fake, fc_fake)
        _finite_or_abort(epoch, b, {"loss_d_sc": d_sc.item(), "loss_d_fc": d_fc.item()})
        (d_sc + d_fc).backward()
        adam_step(model.d_store, **adam_kw)

        model.g_store.zero_grad()
        total, (g_sc, g_fc, cls, r_sc, r_fc), logits = generator_losses(
            model, batch, cfg, mc, sc_fake, fc_fake)
        row = {"loss_d_sc": d_sc.item(), "loss_d_fc": d_fc.item(), "loss_g_sc": g_sc.item(),
               "loss_g_fc": g_fc.item(), "loss_cls": cls.item(), "loss_rcs_sc": r_sc.item(),
               "loss_rcs_fc": r_fc.item(), "loss_total": total.item()}
        _finite_or_abort(epoch, b, row)
        total.backward()
        adam_step(model.g_store, **adam_kw)

        for k in LOSS_COLUMNS:
            sums[k] += row[k] * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == batch["stage"]))
    return correct


def train(cohort, config: TrainConfig, state: TrainState | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Train (or resume ``state``) for ``config.epochs`` total epochs."""
    if not cohort:
        raise ValueError("cohort is empty")
    stages = {s.stage for s in cohort}
    if config.w_cls > 0 and len(stages) < 2:
        raise ValueError("classification loss needs at least two stages in the cohort")
    arrays = stack_cohort(cohort)
    n, T = arrays["bold"].shape[1:]
    if state is None:
        state = init_state(config, n, T)
    elif (state.model.n, state.model.T) != (n, T):
        raise ValueError(f"state built for n={state.model.n}, T={state.model.T}; cohort has n={n}, T={T}")
    from .checkpoint import save_checkpoint

    while state.epoch < config.epochs:
        row = train_epoch(state, arrays)
        log.debug("epoch %d: %s", row["epoch"], row)
        if on_epoch is not None:
            on_epoch(row)
        if config.checkpoint_every and config.checkpoint_dir and state.epoch % config.checkpoint_every == 0:
            save_checkpoint(Path(config.checkpoint_dir) / f"checkpoint_epoch{state.epoch:04d}.npz", state)
    if config.metrics_path:
        write_history(state.history, config.metrics_path)
    return state


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items()})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- inference helpers

def compute_mc(model: Model, subjects, batch_size: int = 32) -> np.ndarray:
    arrays = stack_cohort(subjects)
    out = []
    for start in range(0, len(subjects), batch_size):
        sl = slice(start, start + batch_size)
        out.append(generator_forward_batch(arrays["bold"][sl], arrays["sc"][sl], model.gen).data)
    return np.concatenate(out)


def predict_proba(model: Model, subjects=None, mc: np.ndarray | None = None) -> np.ndarray:
    if mc is None:
        mc = compute_mc(model, subjects)
    return nx.softmax_rows(classifier_logits(head_input(model, mc), model.classifier)).data


def reconstruction_error(model: Model, subjects) -> tuple[float, float]:
    """Mean per-edge L1 of decoded SC and FC against the subjects' empirical matrices."""
    arrays = stack_cohort(subjects)
    z = head_input(model, compute_mc(model, subjects))
    sc = loss_reconstruction(decode_sc(z, model.dec_sc), arrays["sc"]).item()
    fc = loss_reconstruction(decode_fc(z, model.dec_fc), arrays["fc"]).item()
    return sc, fc


def stage_labels(subjects) -> np.ndarray:
    return np.array([int(Stage.parse(s.stage)) for s in subjects], dtype=np.int64)
