import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from quadmix.aggregation import (AggregationConfig, CategoryFeatureBank, entropy_weights,
                                 mean_entropy, mmd_align, spatial_aggregate, temporal_aggregate)
from quadmix.errors import ConfigError, ShapeError
from quadmix.tensor_io import IGNORE, LabelMap

from conftest import random_labels


def random_bank(rng, k=4, c=3, p_valid=0.7):
    valid = rng.random(k) < p_valid
    vectors = np.where(valid[:, None], rng.standard_normal((k, c)), 0.0)
    return CategoryFeatureBank(vectors, valid)


def test_single_category_is_spatial_mean(nprng):
    f = nprng.random((3, 4, 4))
    bank = spatial_aggregate(f, LabelMap(np.zeros((4, 4)), 2))
    assert np.allclose(bank.vectors[0], f.mean(axis=(1, 2)))
    assert bank.valid.tolist() == [True, False]
    assert not bank.vectors[1].any()


def test_spatial_matches_loop_oracle(nprng):
    for _ in range(20):
        f = nprng.random((5, 4, 4)).astype(np.float32)
        lab = random_labels(nprng, 3, (4, 4))
        bank = spatial_aggregate(f, lab)
        for k in range(3):
            acc, n = np.zeros(5), 0
            for y in range(4):
                for x in range(4):
                    if lab.values[y, x] == k:
                        acc += f[:, y, x].astype(np.float64)
                        n += 1
            assert bank.valid[k] == (n > 0)
            assert np.abs(bank.vectors[k] - (acc / n if n else 0)).max() < 1e-6
            assert bank.counts[k] == n


def test_spatial_permutation_invariant(nprng):
    f = nprng.random((3, 6, 6))
    lab = random_labels(nprng, 4, (6, 6))
    perm = nprng.permutation(36)
    f2 = f.reshape(3, -1)[:, perm].reshape(3, 6, 6)
    lab2 = lab.with_values(lab.values.ravel()[perm].reshape(6, 6))
    assert np.allclose(spatial_aggregate(f, lab).vectors, spatial_aggregate(f2, lab2).vectors, atol=1e-6)


def test_spatial_shape_error():
    with pytest.raises(ShapeError):
        spatial_aggregate(np.zeros((2, 3, 3)), LabelMap(np.zeros((4, 4)), 2))


# --------------------------------------------------------------------------
# entropy weights


def test_uniform_logits_entropy_is_log_k():
    assert mean_entropy(np.zeros((4, 3, 3))) == pytest.approx(math.log(4))


def test_identical_logits_give_uniform_weights(nprng):
    z = nprng.standard_normal((3, 4, 4))
    assert np.allclose(entropy_weights([z, z, z]), 1 / 3)
    assert entropy_weights([z]).tolist() == [1.0]


def test_confident_vs_uniform_example():
    confident = np.zeros((4, 2, 2))
    confident[0] = 60.0
    w = entropy_weights([confident, np.zeros((4, 2, 2))])
    # closed form: softmax of (0, -ln 4)
    assert np.allclose(w, [0.8, 0.2], atol=1e-3)
    assert np.allclose(w, [1 / (1 + 1 / 4), (1 / 4) / (1 + 1 / 4)], atol=1e-9)


def test_entropy_errors():
    with pytest.raises(ShapeError):
        mean_entropy(np.zeros((1, 2, 2)))
    with pytest.raises(ShapeError):
        entropy_weights([])
    with pytest.raises(ShapeError):
        entropy_weights([np.zeros((2, 2, 2)), np.zeros((2, 3, 2))])


@given(st.lists(hnp.arrays(np.float64, (3, 3, 3), elements=st.floats(-20, 20)), min_size=1, max_size=4))
def test_entropy_weights_form_distribution(logits):
    w = entropy_weights(logits)
    assert (w >= 0).all() and abs(w.sum() - 1) < 1e-6
    ent = [mean_entropy(z) for z in logits]
    for i in range(len(w)):
        for j in range(len(w)):
            if ent[i] < ent[j] - 1e-9:
                assert w[i] > w[j]


# --------------------------------------------------------------------------
# temporal aggregation


def test_one_timestep_identity(nprng):
    b = random_bank(nprng)
    out = temporal_aggregate([b], np.array([1.0]))
    assert np.allclose(out.vectors, b.vectors) and np.array_equal(out.valid, b.valid)


def test_equal_banks_any_weights(nprng):
    b = random_bank(nprng)
    out = temporal_aggregate([b, b], np.array([0.3, 0.7]))
    assert np.allclose(out.vectors, b.vectors)


def test_renormalises_over_valid_timesteps():
    v1 = np.array([[1.0, 2.0], [5.0, 5.0]])
    v2 = np.array([[0.0, 0.0], [1.0, 1.0]])
    b1 = CategoryFeatureBank(v1, np.array([True, True]))
    b2 = CategoryFeatureBank(v2, np.array([False, True]))
    out = temporal_aggregate([b1, b2], np.array([0.3, 0.7]))
    assert out.vectors[0].tolist() == [1.0, 2.0]
    assert np.allclose(out.vectors[1], 0.3 * v1[1] + 0.7 * v2[1])


def test_temporal_matches_loop_oracle(nprng):
    for _ in range(20):
        banks = [random_bank(nprng) for _ in range(3)]
        w = nprng.random(3)
        w /= w.sum()
        out = temporal_aggregate(banks, w)
        for k in range(4):
            ts = [t for t in range(3) if banks[t].valid[k]]
            assert out.valid[k] == bool(ts)
            if ts:
                norm = sum(w[t] for t in ts)
                ref = sum(w[t] * banks[t].vectors[k] for t in ts) / norm
                assert np.allclose(out.vectors[k], ref, atol=1e-12)
            else:
                assert not out.vectors[k].any()


def test_temporal_errors(nprng):
    b = random_bank(nprng)
    with pytest.raises(ShapeError):
        temporal_aggregate([b, b], np.array([1.0]))
    with pytest.raises(ShapeError):
        temporal_aggregate([b, b], np.array([0.5, 0.6]))
    with pytest.raises(ShapeError):
        temporal_aggregate([b, random_bank(nprng, k=5)], np.array([0.5, 0.5]))


# --------------------------------------------------------------------------
# alignment


def test_mmd_identical_banks_zero(nprng):
    b = random_bank(nprng)
    assert mmd_align(b, b).loss == 0.0
    assert mmd_align(b, b, AggregationConfig(kernel="rbf")).loss == pytest.approx(0.0, abs=1e-9)


def test_mmd_linear_closed_form():
    a = CategoryFeatureBank(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([True, False]))
    b = CategoryFeatureBank(np.array([[1.0, 2.5], [3.0, 3.0]]), np.array([True, True]))
    res = mmd_align(a, b, AggregationConfig(lambda_f=0.01))
    assert res.loss == pytest.approx(0.01 * 0.25)
    assert res.categories == (0,) and not res.no_overlap


def test_mmd_no_overlap():
    a = CategoryFeatureBank(np.ones((2, 2)), np.array([True, False]))
    b = CategoryFeatureBank(np.ones((2, 2)), np.array([False, True]))
    res = mmd_align(a, b)
    assert res.loss == 0.0 and res.no_overlap


def test_mmd_batch_uses_means(nprng):
    src = [CategoryFeatureBank(nprng.standard_normal((3, 2)), np.ones(3, bool)) for _ in range(3)]
    tgt = [CategoryFeatureBank(nprng.standard_normal((3, 2)), np.ones(3, bool)) for _ in range(2)]
    ms = np.mean([b.vectors.ravel() for b in src], axis=0)
    mt = np.mean([b.vectors.ravel() for b in tgt], axis=0)
    assert mmd_align(src, tgt, AggregationConfig(lambda_f=1.0)).loss == pytest.approx(((ms - mt) ** 2).sum())


def test_mmd_rbf_matches_biased_estimator(nprng):
    src = [CategoryFeatureBank(nprng.standard_normal((2, 2)), np.ones(2, bool)) for _ in range(3)]
    tgt = [CategoryFeatureBank(nprng.standard_normal((2, 2)), np.ones(2, bool)) for _ in range(3)]
    x = np.array([b.vectors.ravel() for b in src])
    y = np.array([b.vectors.ravel() for b in tgt])

    def k(a, b):
        return math.exp(-((a - b) ** 2).sum() / (2 * 1.5 ** 2))

    ref = (np.mean([[k(a, b) for b in x] for a in x]) + np.mean([[k(a, b) for b in y] for a in y])
           - 2 * np.mean([[k(a, b) for b in y] for a in x]))
    got = mmd_align(src, tgt, AggregationConfig(kernel="rbf", bandwidth=1.5, lambda_f=1.0)).loss
    assert got == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_mmd_symmetric_nonnegative(nprng, kernel):
    cfg = AggregationConfig(kernel=kernel)
    for _ in range(200):
        a, b = random_bank(nprng), random_bank(nprng)
        ab, ba = mmd_align(a, b, cfg).loss, mmd_align(b, a, cfg).loss
        assert ab == pytest.approx(ba, abs=1e-12)
        assert mmd_align(a, a, cfg).loss == pytest.approx(0.0, abs=1e-9)
        if kernel == "linear":
            assert ab >= 0


def test_config_validation():
    with pytest.raises(ConfigError):
        AggregationConfig(target_offsets=())
    with pytest.raises(ConfigError):
        AggregationConfig(lambda_f=-1)
    with pytest.raises(ConfigError):
        AggregationConfig(kernel="poly")
    with pytest.raises(ConfigError):
        AggregationConfig(bandwidth=0.0)
    assert AggregationConfig.for_tau(1).target_offsets == (1, 2)
    assert AggregationConfig.for_tau(3).target_offsets == (1, 3, 4)


def test_ignore_pixels_excluded():
    f = np.arange(4, dtype=np.float64).reshape(1, 2, 2)
    bank = spatial_aggregate(f, LabelMap(np.array([[0, IGNORE], [IGNORE, 0]]), 2))
    assert bank.vectors[0, 0] == 1.5
