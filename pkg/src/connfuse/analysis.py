"""Group-mean MC per stage, thresholded stage deltas and ROI ranking."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datamodel import Stage
from .training import Model, compute_mc, head_input

DEFAULT_TAU_QUANTILES = (0.5, 0.7, 0.9)


def group_mean_mc(cohort, model: Model, stage, normalized: bool = False) -> np.ndarray:
    """Entrywise mean MC over the subjects of ``stage``.

    ``normalized=True`` averages the normalized MC the heads read instead
    of the raw generator output.
    """
    stage = Stage.parse(stage)
    group = [s for s in cohort if s.stage is stage]
    if not group:
        raise ValueError(f"no subjects with stage {stage.name}")
    mc = compute_mc(model, group)
    if normalized:
        mc = head_input(model, mc).data
    return mc.mean(axis=0)


@dataclass
class StageDelta:
    from_stage: Stage
    to_stage: Stage
    delta: np.ndarray
    tau: float
    increased: list  # (i, j) with i < j and delta > tau
    decreased: list  # (i, j) with i < j and delta < -tau

    def edges(self) -> list[tuple[int, int, float, str]]:
        rows = [(i, j, float(self.delta[i, j]), "increased") for i, j in self.increased]
        rows += [(i, j, float(self.delta[i, j]), "decreased") for i, j in self.decreased]
        return sorted(rows)


def delta_connectivity(mean_a: np.ndarray, mean_b: np.ndarray, tau: float = 0.0,
                       from_stage=Stage.NC, to_stage=Stage.AD) -> StageDelta:
    """Edges whose mean connectivity moves by more than ``tau`` from ``mean_a`` to ``mean_b``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    delta = np.asarray(mean_b, dtype=float) - np.asarray(mean_a, dtype=float)
    rows, cols = np.triu_indices(delta.shape[0], 1)
    vals = delta[rows, cols]
    up = [(int(i), int(j)) for i, j, v in zip(rows, cols, vals) if v > tau]
    down = [(int(i), int(j)) for i, j, v in zip(rows, cols, vals) if v < -tau]
    return StageDelta(Stage.parse(from_stage), Stage.parse(to_stage), delta, float(tau), up, down)


def tau_from_quantile(delta: np.ndarray, q: float) -> float:
    """Threshold at quantile ``q`` of the off-diagonal |delta| entries."""
    rows, cols = np.triu_indices(delta.shape[0], 1)
    return float(np.quantile(np.abs(delta[rows, cols]), q))


def roi_scores(delta, center: bool = True) -> np.ndarray:
    """L1 row mass of the off-diagonal delta.

    With ``center`` the median off-diagonal delta is subtracted first. A shift
    shared by every edge (one group simply having larger MC overall) adds the
    same amount to every ROI and would otherwise bury the localized changes.
    """
    d = delta.delta if isinstance(delta, StageDelta) else np.asarray(delta, dtype=float)
    off = ~np.eye(d.shape[0], dtype=bool)
    if center:
        d = d - np.median(d[off])
    return np.where(off, np.abs(d), 0.0).sum(axis=1)


def top_k_rois(delta, k: int = 8, center: bool = True) -> list[tuple[int, float]]:
    """ROIs ranked by :func:`roi_scores`; ties go to the lower index."""
    scores = roi_scores(delta, center)
    if not 0 <= k <= scores.size:
        raise ValueError(f"k={k} outside [0, {scores.size}]")
    order = np.lexsort((np.arange(scores.size), -scores))
    return [(int(i), float(scores[i])) for i in order[:k]]


# ---------------------------------------------------------------- outputs

def write_matrix(m: np.ndarray, path) -> None:
    np.savetxt(path, m, delimiter=",", fmt="%.17g")


def write_edges(delta: StageDelta, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "delta", "class"])
        for i, j, v, cls in delta.edges():
            w.writerow([i, j, repr(v), cls])


def write_ranking(ranking, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "roi", "score"])
        for r, (i, s) in enumerate(ranking, 1):
            w.writerow([r, i, repr(s)])
