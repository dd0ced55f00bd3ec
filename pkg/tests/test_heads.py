import numpy as np
import pytest

from connfuse.datamodel import ConnMatrix, Flavor, pearson_fc
from connfuse.generator import fuse_mc
from connfuse.heads import (HeadKind, classifier_logits, classify, decode_fc,
                            decode_sc, discriminate, init_head, rms_normalize, upper_features,
                            zscore_normalize)
from connfuse.numerics import ParamStore, ShapeError


def _mc(seed=0, n=6, d=3, batch=None):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    return fuse_mc(rng.standard_normal(lead + (n, n)), rng.standard_normal(lead + (n, d))).data


@pytest.mark.parametrize("kind,dims", [
    (HeadKind.DECODER_SC, (21, 15)), (HeadKind.DECODER_FC, (21, 15)),
    (HeadKind.DISCR_SC, (15, 1)), (HeadKind.DISCR_FC, (15, 1)), (HeadKind.CLASSIFIER, (21, 4)),
])
def test_head_dimensions(kind, dims):
    p = init_head(kind, 6, (256,))
    assert (p.in_dim, p.out_dim) == dims
    assert p.layers[0][0].shape == (dims[0], 256)


def test_decoded_sc_satisfies_structural_invariants():
    p = init_head(HeadKind.DECODER_SC, 6, (32,))
    for b in range(3):
        sc = decode_sc(_mc(b), p).data
        ConnMatrix(sc, Flavor.STRUCTURAL)
        assert np.all(sc[~np.eye(6, dtype=bool)] > 0)


def test_decoded_fc_satisfies_functional_invariants():
    p = init_head(HeadKind.DECODER_FC, 6, (32,))
    fc = decode_fc(_mc(1, batch=4) * 100, p).data
    for m in fc:
        ConnMatrix(m, Flavor.FUNCTIONAL)


def test_batched_and_single_agree():
    p = init_head(HeadKind.DECODER_SC, 6, (16,))
    c = init_head(HeadKind.CLASSIFIER, 6, (16,))
    batch = _mc(2, batch=3)
    np.testing.assert_allclose(decode_sc(batch, p).data[1], decode_sc(batch[1], p).data, rtol=1e-13)
    np.testing.assert_allclose(classifier_logits(batch, c).data[2], classifier_logits(batch[2], c).data,
                               rtol=1e-13)


def test_classifier_outputs_distribution():
    c = init_head(HeadKind.CLASSIFIER, 6, (16,))
    prob = classify(_mc(3, batch=5), c).data
    assert prob.shape == (5, 4)
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-14)


def test_discriminator_in_open_unit_interval_and_flavor_checked():
    rng = np.random.default_rng(0)
    d_fc = init_head(HeadKind.DISCR_FC, 6, (16,))
    fc = pearson_fc(rng.standard_normal((6, 40)))
    prob = discriminate(fc, d_fc).item()
    assert 0 < prob < 1
    sc = ConnMatrix(np.ones((6, 6)) - np.eye(6), Flavor.STRUCTURAL)
    with pytest.raises(ValueError, match="cannot judge"):
        discriminate(sc, d_fc)
    with pytest.raises(ValueError):
        discriminate(fc.values, init_head(HeadKind.CLASSIFIER, 6, (4,)))


def test_discriminator_ignores_the_diagonal():
    d = init_head(HeadKind.DISCR_SC, 5, (8,))
    a = np.ones((5, 5))
    b = a.copy()
    np.fill_diagonal(b, 7.0)
    assert discriminate(a, d).item() == discriminate(b, d).item()


def test_head_kind_mismatch_rejected():
    p = init_head(HeadKind.DECODER_FC, 6, (8,))
    with pytest.raises(ValueError):
        decode_sc(_mc(), p)
    with pytest.raises(ShapeError):
        decode_fc(_mc(n=7), p)


def test_rms_normalize_has_unit_rms_and_is_scale_free():
    mc = _mc(4, batch=3)
    z = rms_normalize(mc).data
    np.testing.assert_allclose(np.sqrt((z ** 2).mean(axis=(1, 2))), 1.0, rtol=1e-12)
    np.testing.assert_allclose(rms_normalize(mc * 1e-6).data, z, rtol=1e-9)


def test_zscore_normalize_moments_and_affine_invariance():
    mc = _mc(5, batch=3)
    z = zscore_normalize(mc).data
    np.testing.assert_allclose(z.mean(axis=(1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(1, 2)), 1.0, rtol=1e-12)
    np.testing.assert_allclose(zscore_normalize(3.5 * mc + 40.0).data, z, rtol=1e-9, atol=1e-9)
    assert np.all(zscore_normalize(np.full((4, 4), 2.0)).data == 0)


def test_upper_features_order():
    m = np.array([[1, 2], [2, 3.0]])
    np.testing.assert_array_equal(upper_features(m), [1, 2, 3])


def test_init_into_shared_store_uses_prefix():
    store = ParamStore()
    init_head(HeadKind.DECODER_SC, 4, (8,), store=store)
    init_head(HeadKind.DECODER_FC, 4, (8,), store=store)
    assert len(store.names("dec_sc.")) == 4 and len(store.names("dec_fc.")) == 4
