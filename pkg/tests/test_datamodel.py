import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from connfuse.datamodel import (CohortIOError, ConnMatrix, Flavor, InvariantError, Stage, Subject,
                                load_cohort, pearson_fc, save_cohort, stack_cohort, unvec_upper,
                                vec_upper)


def pearson_loops(x):
    """Textbook double loop over ROI pairs."""
    n, t = x.shape
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            mi, mj = sum(x[i]) / t, sum(x[j]) / t
            num = sum((x[i, k] - mi) * (x[j, k] - mj) for k in range(t))
            den = math.sqrt(sum((x[i, k] - mi) ** 2 for k in range(t))
                            * sum((x[j, k] - mj) ** 2 for k in range(t)))
            out[i, j] = num / den
    return out


def _subject(sid="NC_000", n=4, t=30, seed=0, stage="NC"):
    rng = np.random.default_rng(seed)
    bold = rng.standard_normal((n, t))
    sc = np.triu(rng.uniform(0, 1, (n, n)), 1)
    return Subject(sid, bold, ConnMatrix(sc + sc.T, Flavor.STRUCTURAL), pearson_fc(bold), stage)


@pytest.mark.parametrize("seed", range(5))
def test_pearson_matches_double_loop(seed):
    x = np.random.default_rng(seed).standard_normal((5, 17)) * 3 + 1
    np.testing.assert_allclose(pearson_fc(x).values, pearson_loops(x), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(3, 40), st.integers(0, 10_000))
def test_pearson_invariants(n, t, seed):
    x = np.random.default_rng(seed).standard_normal((n, t))
    r = pearson_fc(x).values
    assert np.array_equal(r, r.T)
    assert np.all(np.diag(r) == 1.0)
    assert np.all(np.abs(r) <= 1.0)


def test_pearson_is_shift_and_scale_invariant():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 50))
    y = x * rng.uniform(0.5, 3, (4, 1)) + rng.uniform(-5, 5, (4, 1))
    np.testing.assert_allclose(pearson_fc(x).values, pearson_fc(y).values, atol=1e-12)


def test_pearson_zero_variance_row_is_named():
    x = np.random.default_rng(0).standard_normal((4, 20))
    x[2] = 7.0
    with pytest.raises(ValueError, match="row 2"):
        pearson_fc(x)


def test_conn_matrix_invariants():
    with pytest.raises(InvariantError, match="symmetric"):
        ConnMatrix(np.array([[0, 1.0], [0.5, 0]]), Flavor.STRUCTURAL)
    with pytest.raises(InvariantError, match="negative"):
        ConnMatrix(np.array([[0, -1.0], [-1.0, 0]]), Flavor.STRUCTURAL)
    with pytest.raises(InvariantError, match="diagonal"):
        ConnMatrix(np.eye(2) * 0.5, Flavor.FUNCTIONAL)
    with pytest.raises(InvariantError):
        ConnMatrix(np.array([[1, 1.5], [1.5, 1]]), Flavor.FUNCTIONAL)


def test_subject_checks_shapes_and_length():
    s = _subject()
    with pytest.raises(InvariantError, match="time points"):
        Subject("x", s.bold[:, :10], s.sc_emp, pearson_fc(s.bold[:, :10]), "NC")
    with pytest.raises(InvariantError, match="swapped"):
        Subject("x", s.bold, s.fc_emp, s.sc_emp, "NC")


def test_stage_parse():
    assert Stage.parse("ad") is Stage.AD and Stage.parse(Stage.NC) is Stage.NC
    assert [int(s) for s in Stage] == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        Stage.parse("MCI")


@given(st.integers(1, 9), st.booleans(), st.integers(0, 999))
def test_vec_unvec_roundtrip(n, diag, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    a = a + a.T
    if not diag:
        np.fill_diagonal(a, 0.25)
    v = vec_upper(a, diag)
    assert v.size == (n * (n + 1) // 2 if diag else n * (n - 1) // 2)
    np.testing.assert_array_equal(unvec_upper(v, n, diag, diag_value=0.25), a)


def test_vec_upper_is_row_major():
    a = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], dtype=float)
    np.testing.assert_array_equal(vec_upper(a), [1, 2, 3])
    with pytest.raises(InvariantError):
        vec_upper(np.array([[0, 1.0], [2.0, 0]]))


def test_stage_parse_accepts_names_and_codes():
    assert Stage.parse(" lmci ") is Stage.LMCI
    assert Stage.parse(np.int64(3)) is Stage.AD
    with pytest.raises(ValueError):
        Stage.parse(4)
    with pytest.raises(ValueError):
        Stage.parse(True)


def test_cohort_roundtrip_is_exact(tmp_path):
    subjects = [_subject(f"S_{i}", seed=i, stage=i % 4) for i in range(4)]
    save_cohort(subjects, tmp_path)
    back = load_cohort(tmp_path)
    for a, b in zip(subjects, back):
        assert a.id == b.id and a.stage is b.stage
        assert np.array_equal(a.bold, b.bold)
        assert np.array_equal(a.sc_emp.values, b.sc_emp.values)
        assert np.array_equal(a.fc_emp.values, b.fc_emp.values)
    arr = stack_cohort(back)
    assert arr["bold"].shape == (4, 4, 30) and list(arr["stage"]) == [0, 1, 2, 3]


def test_cohort_errors_name_the_subject(tmp_path):
    save_cohort([_subject("NC_007")], tmp_path)
    (tmp_path / "NC_007_fc.csv").unlink()
    with pytest.raises(CohortIOError, match="NC_007"):
        load_cohort(tmp_path)
    with pytest.raises(CohortIOError):
        load_cohort(tmp_path / "missing")


def test_cohort_shape_mismatch_is_an_invariant_error(tmp_path):
    save_cohort([_subject("AD_001", stage="AD")], tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest[0]["n"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(InvariantError, match="AD_001"):
        load_cohort(tmp_path)
