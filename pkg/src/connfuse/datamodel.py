"""Subjects, connectivity matrices, Pearson FC and cohort directory I/O."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SYM_TOL = 1e-9
MIN_TIMEPOINTS = 20


class InvariantError(ValueError):
    """A value violates a documented invariant."""


class CohortIOError(OSError):
    pass


@enum.unique
class Stage(enum.IntEnum):
    NC = 0
    EMCI = 1
    LMCI = 2
    AD = 3

    @classmethod
    def parse(cls, value) -> Stage:
        if isinstance(value, Stage):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            try:
                return cls(int(value))
            except ValueError:
                raise ValueError(f"unknown stage code {value!r}; expected 0-3") from None
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown stage {value!r}; expected one of NC/EMCI/LMCI/AD") from None


class Flavor(enum.Enum):
    STRUCTURAL = "structural"
    FUNCTIONAL = "functional"


@dataclass(frozen=True)
class ConnMatrix:
    values: np.ndarray
    flavor: Flavor

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        check_conn(v, self.flavor)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def check_conn(values: np.ndarray, flavor: Flavor, label: str = "") -> None:
    where = f"{label}: " if label else ""
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InvariantError(f"{where}connectivity must be square, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise InvariantError(f"{where}connectivity has non-finite entries")
    if np.max(np.abs(values - values.T), initial=0.0) > SYM_TOL:
        raise InvariantError(f"{where}connectivity is not symmetric")
    diag = np.diag(values)
    if flavor is Flavor.STRUCTURAL:
        if np.any(values < 0):
            raise InvariantError(f"{where}structural connectivity has negative entries")
        if np.any(diag != 0):
            raise InvariantError(f"{where}structural diagonal must be 0")
    else:
        if np.any(np.abs(values) > 1 + 1e-12):
            raise InvariantError(f"{where}functional connectivity outside [-1, 1]")
        if np.any(np.abs(diag - 1) > 1e-12):
            raise InvariantError(f"{where}functional diagonal must be 1")


@dataclass(frozen=True)
class Subject:
    id: str
    bold: np.ndarray
    sc_emp: ConnMatrix
    fc_emp: ConnMatrix
    stage: Stage

    def __post_init__(self):
        bold = np.asarray(self.bold, dtype=float)
        object.__setattr__(self, "bold", bold)
        object.__setattr__(self, "stage", Stage.parse(self.stage))
        if bold.ndim != 2:
            raise InvariantError(f"{self.id}: BOLD must be n×T, got shape {bold.shape}")
        n, t = bold.shape
        if self.sc_emp.flavor is not Flavor.STRUCTURAL or self.fc_emp.flavor is not Flavor.FUNCTIONAL:
            raise InvariantError(f"{self.id}: sc_emp/fc_emp flavors swapped")
        if self.sc_emp.n != n or self.fc_emp.n != n:
            raise InvariantError(
                f"{self.id}: ROI counts disagree (bold {n}, sc {self.sc_emp.n}, fc {self.fc_emp.n})")
        if t < MIN_TIMEPOINTS:
            raise InvariantError(f"{self.id}: need at least {MIN_TIMEPOINTS} time points, got {t}")

    @property
    def n(self) -> int:
        return self.bold.shape[0]

    @property
    def T(self) -> int:
        return self.bold.shape[1]


def pearson_fc(bold: np.ndarray) -> ConnMatrix:
    """Row-wise Pearson correlation matrix of an n×T BOLD array."""
    x = np.asarray(bold, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"BOLD must be n×T with T >= 2, got shape {x.shape}")
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", xc, xc))
    scale = np.abs(x).max(axis=1) + 1.0
    dead = np.flatnonzero(norms <= 1e-12 * scale * np.sqrt(x.shape[1]))
    if dead.size:
        raise ValueError(f"BOLD row {int(dead[0])} has zero variance")
    z = xc / norms[:, None]
    r = z @ z.T
    r = np.clip((r + r.T) / 2, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return ConnMatrix(r, Flavor.FUNCTIONAL)


@lru_cache(maxsize=None)
def triu_indices(n: int, include_diag: bool) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(n, k=0 if include_diag else 1)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def vec_upper(m: np.ndarray, include_diag: bool = False) -> np.ndarray:
    """Row-major upper-triangle flattening of a symmetric matrix."""
    m = np.asarray(m)
    if m.shape[-1] != m.shape[-2] or np.max(np.abs(m - np.swapaxes(m, -1, -2)), initial=0) > SYM_TOL:
        raise InvariantError("vec_upper needs a symmetric matrix")
    rows, cols = triu_indices(m.shape[-1], include_diag)
    return m[..., rows, cols]


def unvec_upper(v: np.ndarray, n: int, include_diag: bool = False, diag_value: float = 0.0) -> np.ndarray:
    """Inverse of :func:`vec_upper`; ``diag_value`` fills the diagonal for strict vectors."""
    v = np.asarray(v)
    rows, cols = triu_indices(n, include_diag)
    if v.shape[-1] != rows.size:
        raise ValueError(f"vector length {v.shape[-1]} does not match n={n}")
    out = np.zeros(v.shape[:-1] + (n, n), dtype=v.dtype)
    if not include_diag:
        idx = np.arange(n)
        out[..., idx, idx] = diag_value
    out[..., rows, cols] = v
    out[..., cols, rows] = v
    return out


# ---------------------------------------------------------------- cohort files

MANIFEST = "manifest.json"


def _write_csv(path: Path, a: np.ndarray) -> None:
    # repr-precision floats make the round trip exact
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def _read_csv(path: Path, sid: str, what: str) -> np.ndarray:
    if not path.exists():
        raise CohortIOError(f"{sid}: missing {what} file {path.name}")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise CohortIOError(f"{sid}: cannot parse {path.name}: {exc}") from None


def save_cohort(subjects, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in subjects:
        files = {"bold": f"{s.id}_bold.csv", "sc": f"{s.id}_sc.csv", "fc": f"{s.id}_fc.csv"}
        _write_csv(root / files["bold"], s.bold)
        _write_csv(root / files["sc"], s.sc_emp.values)
        _write_csv(root / files["fc"], s.fc_emp.values)
        manifest.append({"id": s.id, "stage": s.stage.name, "files": files, "n": s.n, "T": s.T})
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return root


def load_cohort(path) -> list[Subject]:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise CohortIOError(f"no {MANIFEST} in {root}")
    try:
        records = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CohortIOError(f"{mpath}: invalid JSON ({exc})") from None
    subjects = []
    for rec in records:
        sid = rec.get("id", "?")
        try:
            files = rec["files"]
            n, t = int(rec["n"]), int(rec["T"])
            stage = Stage.parse(rec["stage"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CohortIOError(f"{sid}: malformed manifest record ({exc})") from None
        bold = _read_csv(root / files["bold"], sid, "BOLD")
        sc = _read_csv(root / files["sc"], sid, "SC")
        fc = _read_csv(root / files["fc"], sid, "FC")
        if bold.shape != (n, t) or sc.shape != (n, n) or fc.shape != (n, n):
            raise InvariantError(
                f"{sid}: shape mismatch (bold {bold.shape}, sc {sc.shape}, fc {fc.shape}; "
                f"manifest n={n}, T={t})")
        try:
            subjects.append(Subject(sid, bold, ConnMatrix(sc, Flavor.STRUCTURAL),
                                    ConnMatrix(fc, Flavor.FUNCTIONAL), stage))
        except InvariantError as exc:
            msg = str(exc)
            raise InvariantError(msg if msg.startswith(sid) else f"{sid}: {msg}") from None
    return subjects


def stack_cohort(subjects) -> dict[str, np.ndarray]:
    """Batch arrays (B,n,T), (B,n,n), (B,n,n), (B,) for a list of subjects."""
    return {
        "bold": np.stack([s.bold for s in subjects]),
        "sc": np.stack([s.sc_emp.values for s in subjects]),
        "fc": np.stack([s.fc_emp.values for s in subjects]),
        "stage": np.array([int(s.stage) for s in subjects], dtype=np.int64),
    }
