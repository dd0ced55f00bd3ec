import warnings

import numpy as np
import pytest

from connfuse.datamodel import Stage, pearson_fc
from connfuse.phantom import (CouplingWarning, PhantomSpec, base_sc, generate_cohort,
                              make_ground_truth_sc, simulate_bold)


def _ranks(x):
    return np.argsort(np.argsort(x)).astype(float)


def spearman(a, b):
    return float(np.corrcoef(_ranks(a), _ranks(b))[0, 1])


def test_default_spec_shape():
    spec = PhantomSpec()
    assert (spec.n, spec.T, spec.n_blocks) == (32, 120, 4)
    assert len(spec.affected_rois) == 8
    assert not set(spec.affected_rois) & set(spec.compensation_rois)
    assert [spec.attenuation[s] for s in Stage] == [1.0, 0.9, 0.8, 0.65]


@pytest.mark.parametrize("bad", [
    dict(affected_rois=[0, 1], compensation_rois=[1]),
    dict(affected_rois=[40]),
    dict(attenuation={"NC": 1.0, "EMCI": 0.7, "LMCI": 0.8, "AD": 0.6}),
    dict(compensation_gain={"NC": 1.2, "EMCI": 1.1, "LMCI": 1.1, "AD": 1.1}),
    dict(rho=1.0),
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        PhantomSpec(**bad)


def test_spec_file_roundtrip(tmp_path):
    spec = PhantomSpec(n=12, seed=9, subjects_per_stage={"NC": 3, "AD": 2})
    spec.save(tmp_path / "spec.json")
    assert PhantomSpec.load(tmp_path / "spec.json") == spec
    with pytest.raises(KeyError, match="bogus"):
        PhantomSpec.from_dict({"bogus": 1})


def test_base_sc_block_structure():
    spec = PhantomSpec(n=16, n_blocks=4)
    sc = base_sc(spec)
    assert np.array_equal(sc, sc.T) and np.all(np.diag(sc) == 0) and np.all(sc >= 0)
    block = np.repeat(np.arange(4), 4)
    same = block[:, None] == block[None, :]
    np.fill_diagonal(same, False)
    diff = block[:, None] != block[None, :]
    assert sc[same].min() > sc[diff].max()


def test_nc_ground_truth_equals_base_and_is_deterministic():
    spec = PhantomSpec(n=16)
    np.testing.assert_array_equal(make_ground_truth_sc(spec, Stage.NC).values, base_sc(spec))
    np.testing.assert_array_equal(make_ground_truth_sc(spec, "AD").values,
                                  make_ground_truth_sc(PhantomSpec(n=16), "AD").values)


def test_affected_strength_decreases_monotonically():
    spec = PhantomSpec()
    strength = [make_ground_truth_sc(spec, s).values[spec.affected_rois].sum() for s in Stage]
    assert all(a > b for a, b in zip(strength, strength[1:]))
    comp = [make_ground_truth_sc(spec, s).values[spec.compensation_rois].sum() for s in Stage]
    assert all(a <= b for a, b in zip(comp, comp[1:]))


def test_simulate_bold_deterministic_and_shaped():
    sc = base_sc(PhantomSpec(n=8, n_blocks=2))
    a = simulate_bold(sc, 60, 0.8, [1, 2])
    assert a.shape == (8, 60)
    np.testing.assert_array_equal(a, simulate_bold(sc, 60, 0.8, [1, 2]))
    assert not np.array_equal(a, simulate_bold(sc, 60, 0.8, [1, 3]))


def test_rho_zero_gives_white_noise():
    sc = base_sc(PhantomSpec(n=8, n_blocks=2))
    fc = pearson_fc(simulate_bold(sc, 2000, 0.0, 5)).values
    off = fc[~np.eye(8, dtype=bool)]
    assert np.max(np.abs(off)) < 0.15


def test_strongly_connected_pair_has_above_median_fc():
    rng = np.random.default_rng(0)
    sc = rng.uniform(0, 0.1, (8, 8))
    sc[0, 1] = 1.0
    sc = np.triu(sc, 1)
    sc = sc + sc.T
    fcs = [pearson_fc(simulate_bold(sc, 1000, 0.9, s)).values for s in range(20)]
    mean = np.mean(fcs, axis=0)
    rows, cols = np.triu_indices(8, 1)
    assert mean[0, 1] > np.median(mean[rows, cols])


def test_zero_sc_warns_and_falls_back_to_noise():
    with pytest.warns(CouplingWarning):
        x = simulate_bold(np.zeros((4, 4)), 30, 0.5, 0)
    assert x.shape == (4, 30) and np.all(np.isfinite(x))


def test_cohort_counts_labels_and_ids():
    spec = PhantomSpec(n=12, T=40, subjects_per_stage={"NC": 5, "EMCI": 0, "LMCI": 0, "AD": 5})
    cohort = generate_cohort(spec)
    assert len(cohort) == 10
    assert sorted({s.stage for s in cohort}) == [Stage.NC, Stage.AD]
    assert len({s.id for s in cohort}) == 10
    assert all(s.id.startswith(s.stage.name) for s in cohort)


def test_cohort_determinism_and_parallel_equivalence():
    spec = PhantomSpec(n=12, T=40, subjects_per_stage={s: 3 for s in Stage}, seed=4)
    a, b = generate_cohort(spec), generate_cohort(spec, workers=3)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.bold, y.bold) and np.array_equal(x.sc_emp.values, y.sc_emp.values)


def test_group_mean_sc_is_closer_to_own_ground_truth():
    spec = PhantomSpec(subjects_per_stage={"NC": 0, "EMCI": 0, "LMCI": 0, "AD": 40})
    mean_sc = np.mean([s.sc_emp.values for s in generate_cohort(spec)], axis=0)
    d_ad = np.linalg.norm(mean_sc - make_ground_truth_sc(spec, "AD").values)
    d_nc = np.linalg.norm(mean_sc - make_ground_truth_sc(spec, "NC").values)
    assert d_ad < d_nc


def test_sc_fc_rank_coupling():
    spec = PhantomSpec(n=16, T=500, rho=0.8, subjects_per_stage={"NC": 20, "EMCI": 0, "LMCI": 0, "AD": 0})
    cohort = generate_cohort(spec)
    gt = make_ground_truth_sc(spec, "NC").values
    mean_fc = np.mean([s.fc_emp.values for s in cohort], axis=0)
    rows, cols = np.triu_indices(16, 1)
    assert spearman(gt[rows, cols], mean_fc[rows, cols]) > 0.3
