"""Binary and 4-way stage classification experiments with stratified k-fold CV."""

from __future__ import annotations

import copy
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .datamodel import Stage
from .heads import HeadKind, classifier_logits, init_head
from .numerics import ParamStore, adam_step
from .training import (TrainConfig, TrainState, compute_mc, head_input, predict_proba,
                       reconstruction_error, stage_labels, train)

EXPERIMENTS = {
    "ad-nc": (Stage.AD, Stage.NC),
    "lmci-nc": (Stage.LMCI, Stage.NC),
    "emci-nc": (Stage.EMCI, Stage.NC),
}
RESULT_COLUMNS = ("experiment", "fold", "tp", "fn", "tn", "fp", "acc", "sen", "spe")


@dataclass
class Metrics:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @property
    def acc(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan

    @property
    def sen(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def spe(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan

    @property
    def undefined(self) -> list[str]:
        """Names of ratios whose denominator is zero."""
        return [k for k in ("acc", "sen", "spe") if math.isnan(getattr(self, k))]

    def __add__(self, other: Metrics) -> Metrics:
        return Metrics(self.tp + other.tp, self.fn + other.fn, self.tn + other.tn, self.fp + other.fp)


def compute_metrics(predicted, actual, positive_class) -> Metrics:
    """Confusion counts with ``positive_class`` as the disease label; everything else is negative."""
    predicted, actual = list(predicted), list(actual)
    if len(predicted) != len(actual):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(actual)} labels")
    p = np.array([x == positive_class for x in predicted])
    a = np.array([x == positive_class for x in actual])
    return Metrics(tp=int(np.sum(p & a)), fn=int(np.sum(~p & a)),
                   tn=int(np.sum(~p & ~a)), fp=int(np.sum(p & ~a)))


def stratified_folds(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Test-index arrays for k folds; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        for j, idx in enumerate(members):
            folds[(offset + j) % k].append(int(idx))
        offset += len(members)
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def binary_decision(proba: np.ndarray, pos: Stage, neg: Stage) -> np.ndarray:
    """Predicted labels after renormalizing the two relevant stage probabilities."""
    return np.where(proba[:, int(pos)] >= proba[:, int(neg)], int(pos), int(neg))


def _retrain_classifier(state: TrainState, subjects, epochs: int, seed: int) -> TrainState:
    """Fresh classifier head on frozen-generator MC features."""
    cfg = state.config
    state = copy.deepcopy(state)
    model = state.model
    store = ParamStore(model.g_store.dtype)
    head = init_head(HeadKind.CLASSIFIER, model.n, (cfg.hidden,), rng=seed, store=store)
    z = head_input(model, compute_mc(model, subjects)).data
    y = stage_labels(subjects)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            store.zero_grad()
            nx.cross_entropy(classifier_logits(z[idx], head), y[idx]).backward()
            adam_step(store, lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                      beta2=cfg.beta2, eps=cfg.eps)
    model.classifier = head
    return state


@dataclass
class ExperimentResult:
    experiment: str
    folds: list  # Metrics per fold, or (correct, total) for fourway
    assignment: list = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        if self.experiment == "fourway":
            return float(np.mean([c / t for c, t in self.folds]))
        return float(np.mean([m.acc for m in self.folds]))

    def mean(self, name: str) -> float:
        return float(np.nanmean([getattr(m, name) for m in self.folds]))

    def rows(self) -> list[dict]:
        out = []
        for i, m in enumerate(self.folds):
            if self.experiment == "fourway":
                c, t = m
                out.append({"experiment": "fourway", "fold": i, "tp": "", "fn": "", "tn": "", "fp": "",
                            "acc": c / t, "sen": "", "spe": ""})
            else:
                out.append({"experiment": self.experiment, "fold": i, "tp": m.tp, "fn": m.fn,
                            "tn": m.tn, "fp": m.fp, "acc": m.acc, "sen": m.sen, "spe": m.spe})
        return out


def binary_experiment(cohort, state: TrainState, stage_pos, stage_neg, folds: int = 5, seed: int = 0,
                      mode: str = "renormalize", head_epochs: int = 100,
                      finetune_epochs: int = 50) -> ExperimentResult:
    """Stratified k-fold binary experiment on the subjects of two stages.

    ``mode``: ``renormalize`` evaluates the trained 4-way classifier restricted to
    the two stages; ``head`` retrains a classifier head on each train fold with
    the generator frozen; ``finetune`` continues training the full model.
    """
    pos, neg = Stage.parse(stage_pos), Stage.parse(stage_neg)
    subjects = [s for s in cohort if s.stage in (pos, neg)]
    present = {s.stage for s in subjects}
    for st in (pos, neg):
        if st not in present:
            raise ValueError(f"stage {st.name} absent from cohort")
    labels = stage_labels(subjects)
    assignment = stratified_folds(labels, folds, seed)
    results = []
    for f, test_idx in enumerate(assignment):
        train_idx = np.setdiff1d(np.arange(len(subjects)), test_idx)
        train_sub = [subjects[i] for i in train_idx]
        test_sub = [subjects[i] for i in test_idx]
        fold_state = _adapt(state, train_sub, mode, seed + f, head_epochs, finetune_epochs)
        pred = binary_decision(predict_proba(fold_state.model, test_sub), pos, neg)
        results.append(compute_metrics(pred, labels[test_idx], int(pos)))
    name = f"{pos.name.lower()}-{neg.name.lower()}"
    return ExperimentResult(name, results, assignment)


def fourway_experiment(cohort, state: TrainState, folds: int = 5, seed: int = 0,
                       mode: str = "renormalize", head_epochs: int = 100,
                       finetune_epochs: int = 50) -> ExperimentResult:
    labels = stage_labels(cohort)
    assignment = stratified_folds(labels, folds, seed)
    results = []
    for f, test_idx in enumerate(assignment):
        train_sub = [cohort[i] for i in np.setdiff1d(np.arange(len(cohort)), test_idx)]
        test_sub = [cohort[i] for i in test_idx]
        fold_state = _adapt(state, train_sub, mode, seed + f, head_epochs, finetune_epochs)
        pred = predict_proba(fold_state.model, test_sub).argmax(axis=1)
        results.append((int(np.sum(pred == labels[test_idx])), len(test_idx)))
    return ExperimentResult("fourway", results, assignment)


def _adapt(state, train_sub, mode, seed, head_epochs, finetune_epochs) -> TrainState:
    if mode == "renormalize":
        return state
    if mode == "head":
        return _retrain_classifier(state, train_sub, head_epochs, seed)
    if mode == "finetune":
        st = copy.deepcopy(state)
        return train(train_sub, st.config.replace(epochs=st.epoch + finetune_epochs,
                                                  metrics_path=None, checkpoint_every=0), st)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- full cross-validation

@dataclass
class FoldOutcome:
    fold: int
    test_idx: np.ndarray
    state: TrainState
    fourway: tuple  # (correct, total)
    binary: dict  # experiment name -> Metrics
    rcs_init: tuple  # (sc, fc) mean per-edge L1 on the train fold before training
    rcs_final: tuple


@dataclass
class CVResult:
    folds: list

    @property
    def fourway_acc(self) -> float:
        return sum(f.fourway[0] for f in self.folds) / sum(f.fourway[1] for f in self.folds)

    def binary_mean(self, name: str, metric: str = "acc") -> float:
        return float(np.nanmean([getattr(f.binary[name], metric) for f in self.folds]))

    def rows(self) -> list[dict]:
        out = []
        for f in self.folds:
            c, t = f.fourway
            out.append({"experiment": "fourway", "fold": f.fold, "tp": "", "fn": "", "tn": "",
                        "fp": "", "acc": c / t, "sen": "", "spe": ""})
            for name, m in f.binary.items():
                out.append({"experiment": name, "fold": f.fold, "tp": m.tp, "fn": m.fn, "tn": m.tn,
                            "fp": m.fp, "acc": m.acc, "sen": m.sen, "spe": m.spe})
        return out


def _run_fold(cohort, config: TrainConfig, f: int, test_idx: np.ndarray) -> FoldOutcome:
    from .training import init_state
    train_idx = np.setdiff1d(np.arange(len(cohort)), test_idx)
    train_sub = [cohort[i] for i in train_idx]
    test_sub = [cohort[i] for i in test_idx]
    cfg = config.replace(seed=config.seed + 1000 * f, metrics_path=None, checkpoint_every=0)
    state = init_state(cfg, cohort[0].n, cohort[0].T)
    rcs_init = reconstruction_error(state.model, train_sub)
    state = train(train_sub, cfg, state)
    rcs_final = reconstruction_error(state.model, train_sub)
    proba = predict_proba(state.model, test_sub)
    labels = stage_labels(test_sub)
    fourway = (int(np.sum(proba.argmax(axis=1) == labels)), len(labels))
    binary = {}
    for name, (pos, neg) in EXPERIMENTS.items():
        m = np.isin(labels, [int(pos), int(neg)])
        if np.any(labels[m] == int(pos)) and np.any(labels[m] == int(neg)):
            pred = binary_decision(proba[m], pos, neg)
            binary[name] = compute_metrics(pred, labels[m], int(pos))
    return FoldOutcome(f, test_idx, state, fourway, binary, rcs_init, rcs_final)


def cross_validate(cohort, config: TrainConfig, folds: int = 5, seed: int = 0,
                   workers: int = 1) -> CVResult:
    """Train one full model per fold on the other folds; score held-out subjects.

    Binary experiments reuse each fold's 4-way model through :func:`binary_decision`.
    Folds run in parallel when ``workers > 1``; results are ordered by fold index.
    """
    assignment = stratified_folds(stage_labels(cohort), folds, seed)
    jobs = list(enumerate(assignment))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(lambda j: _run_fold(cohort, config, *j), jobs))
    else:
        outcomes = [_run_fold(cohort, config, *j) for j in jobs]
    return CVResult(outcomes)


def write_results(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def summary_table(rows) -> str:
    lines = [f"{'experiment':<10} {'fold':>4} {'ACC':>7} {'SEN':>7} {'SPE':>7}"]
    fmt = lambda v: f"{100 * v:6.2f}%" if isinstance(v, float) and not math.isnan(v) else f"{'-':>7}"
    for r in rows:
        lines.append(f"{r['experiment']:<10} {r['fold']:>4} {fmt(r['acc'])} {fmt(r['sen'])} {fmt(r['spe'])}")
    return "\n".join(lines)
