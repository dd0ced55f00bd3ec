"""Synthetic SC -> BOLD -> FC cohorts with known stage effects.

Ground-truth SC is a noisy block (community) matrix. Disease stage scales the
rows and columns of a fixed set of "affected" ROIs down and of a disjoint set
of "compensation" ROIs up. BOLD follows a stable VAR(1) driven by the SC.
"""

from __future__ import annotations

import json
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datamodel import ConnMatrix, Flavor, Stage, Subject, pearson_fc

BURN_IN = 50

DEFAULT_ATTENUATION = {Stage.NC: 1.0, Stage.EMCI: 0.9, Stage.LMCI: 0.8, Stage.AD: 0.65}
DEFAULT_GAIN = {Stage.NC: 1.0, Stage.EMCI: 1.05, Stage.LMCI: 1.1, Stage.AD: 1.2}
# Table-1-like group sizes are available as COHORT_SIZES_ADNI for full-size phantoms.
COHORT_SIZES_ADNI = {Stage.NC: 84, Stage.EMCI: 80, Stage.LMCI: 41, Stage.AD: 63}


class CouplingWarning(UserWarning):
    pass


def _default_rois(n: int) -> tuple[list[int], list[int]]:
    if n >= 16:
        step = n // 8
        affected = [i * step + 1 for i in range(8)]
        comp = [i * step + step // 2 + 1 for i in range(0, 8, 4)]
        comp = [c for c in comp if c not in affected and c < n]
        return affected, comp
    k = max(1, n // 2)
    return list(range(1, k + 1))[: n - 1], []


def _stage_map(d, default) -> dict[Stage, float]:
    out = dict(default)
    for k, v in (d or {}).items():
        out[Stage.parse(k)] = float(v)
    return out


@dataclass
class PhantomSpec:
    n: int = 32
    T: int = 120
    n_blocks: int = 4
    subjects_per_stage: dict = field(default_factory=lambda: {s: 40 for s in Stage})
    affected_rois: list | None = None
    attenuation: dict = field(default_factory=lambda: dict(DEFAULT_ATTENUATION))
    compensation_rois: list | None = None
    compensation_gain: dict = field(default_factory=lambda: dict(DEFAULT_GAIN))
    noise_sigma: float = 0.2
    rho: float = 0.8
    seed: int = 0
    within_weight: float = 1.0
    between_weight: float = 0.1

    def __post_init__(self):
        affected, comp = _default_rois(self.n)
        if self.affected_rois is None:
            self.affected_rois = affected
        if self.compensation_rois is None:
            self.compensation_rois = comp
        self.affected_rois = [int(i) for i in self.affected_rois]
        self.compensation_rois = [int(i) for i in self.compensation_rois]
        self.subjects_per_stage = {Stage.parse(k): int(v) for k, v in self.subjects_per_stage.items()}
        for s in Stage:
            self.subjects_per_stage.setdefault(s, 0)
        self.attenuation = _stage_map(self.attenuation, DEFAULT_ATTENUATION)
        self.compensation_gain = _stage_map(self.compensation_gain, DEFAULT_GAIN)
        self.validate()

    def validate(self) -> None:
        if self.n < 2 or self.T < 20:
            raise ValueError(f"need n >= 2 and T >= 20, got n={self.n}, T={self.T}")
        if not 1 <= self.n_blocks <= self.n:
            raise ValueError(f"n_blocks must be in [1, n], got {self.n_blocks}")
        rois = self.affected_rois + self.compensation_rois
        if any(not 0 <= i < self.n for i in rois):
            raise ValueError(f"ROI indices must lie in [0, {self.n})")
        if set(self.affected_rois) & set(self.compensation_rois):
            raise ValueError("affected and compensation ROI lists overlap")
        att = [self.attenuation[s] for s in Stage]
        if any(not 0 < a <= 1 for a in att) or any(b > a for a, b in zip(att, att[1:])):
            raise ValueError(f"attenuation must be in (0,1] and non-increasing NC->AD, got {att}")
        gain = [self.compensation_gain[s] for s in Stage]
        if any(g < 1 for g in gain) or any(b < a for a, b in zip(gain, gain[1:])):
            raise ValueError(f"compensation_gain must be >= 1 and non-decreasing NC->AD, got {gain}")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must be in [0, 1), got {self.rho}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if any(v < 0 for v in self.subjects_per_stage.values()):
            raise ValueError("subject counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("subjects_per_stage", "attenuation", "compensation_gain"):
            d[key] = {Stage(k).name: v for k, v in getattr(self, key).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown PhantomSpec key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> PhantomSpec:
        return cls.from_dict(load_config_file(path))


def load_config_file(path) -> dict:
    """Flat key/value config: JSON, or YAML when the suffix says so."""
    p = Path(path)
    text = p.read_text()
    if p.suffix in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{p}: config must be a mapping")
    return data


def base_sc(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x5C])
    n = spec.n
    labels = np.arange(n) * spec.n_blocks // n
    same = labels[:, None] == labels[None, :]
    u = rng.uniform(size=(n, n))
    w = np.where(same, spec.within_weight * (0.5 + 0.5 * u), spec.between_weight * u)
    w = np.triu(w, 1)
    return w + w.T


def make_ground_truth_sc(spec: PhantomSpec, stage) -> ConnMatrix:
    stage = Stage.parse(stage)
    scale = np.ones(spec.n)
    scale[spec.affected_rois] = spec.attenuation[stage]
    scale[spec.compensation_rois] = spec.compensation_gain[stage]
    sc = base_sc(spec) * scale[:, None] * scale[None, :]
    np.fill_diagonal(sc, 0.0)
    return ConnMatrix(sc, Flavor.STRUCTURAL)


def simulate_bold(sc, T: int, rho: float, seed) -> np.ndarray:
    """n×T VAR(1) series x_t = rho * A_bar x_{t-1} + e_t, A_bar = sc / spectral_radius(sc)."""
    a = sc.values if isinstance(sc, ConnMatrix) else np.asarray(sc, dtype=float)
    if not 0 <= rho < 1:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    radius = np.max(np.abs(np.linalg.eigvals(a))) if n else 0.0
    if radius == 0:
        if rho > 0:
            warnings.warn("all-zero SC: simulating white noise", CouplingWarning, stacklevel=2)
        coupling = np.zeros_like(a)
    else:
        coupling = rho * a / radius
    noise = rng.standard_normal((T + BURN_IN, n))
    x = np.zeros(n)
    out = np.empty((T + BURN_IN, n))
    for t in range(T + BURN_IN):
        x = coupling @ x + noise[t]
        out[t] = x
    return out[BURN_IN:].T.copy()


def subject_seed(spec_seed: int, sid: str) -> list[int]:
    return [int(spec_seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(sid.encode())]


def _make_subject(spec: PhantomSpec, gt: np.ndarray, stage: Stage, sid: str) -> Subject:
    rng = np.random.default_rng(subject_seed(spec.seed, sid))
    z = np.triu(rng.standard_normal((spec.n, spec.n)), 1)
    z = z + z.T
    sc = np.clip(gt * np.exp(spec.noise_sigma * z), 0.0, None)
    np.fill_diagonal(sc, 0.0)
    bold = simulate_bold(sc, spec.T, spec.rho, rng.integers(2**63))
    return Subject(sid, bold, ConnMatrix(sc, Flavor.STRUCTURAL), pearson_fc(bold), stage)


def generate_cohort(spec: PhantomSpec, workers: int = 1) -> list[Subject]:
    jobs = []
    for stage in Stage:
        gt = make_ground_truth_sc(spec, stage).values
        for i in range(spec.subjects_per_stage[stage]):
            jobs.append((gt, stage, f"{stage.name}_{i:03d}"))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda j: _make_subject(spec, *j), jobs))
    return [_make_subject(spec, *j) for j in jobs]
