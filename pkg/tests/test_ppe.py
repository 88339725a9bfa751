import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseped.core import MODALITIES, Modality
from sparseped.ppe import (
    NEGATIVE,
    POSITIVE,
    UNCERTAIN,
    classify,
    partition_from_similarity,
    pg_loss,
    pg_loss_all_modalities,
)


def brute_force_pg(pos, neg, tau):
    """Term-by-term evaluation of the guiding loss with plain Python sums."""
    def cos(a, b):
        na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    total = 0.0
    for p in pos:
        pp = sum(math.exp(cos(p, q) / tau) for q in pos)
        nn = sum(math.exp(cos(p, q) / tau) for q in neg)
        total += -math.log(pp / (pp + nn))
    return total / len(pos)


def test_threshold_classes():
    part = partition_from_similarity([0.95, 0.80, 0.60, 0.9, 0.7])
    assert [part.label(i) for i in range(5)] == [POSITIVE, UNCERTAIN, NEGATIVE, UNCERTAIN, UNCERTAIN]
    with pytest.raises(ValueError):
        partition_from_similarity([0.5], tau1=0.5, tau2=0.5)


def test_classify_without_ground_truth_is_all_uncertain():
    part = classify(np.ones((3, 4)), [])
    assert part.counts == (0, 0, 3)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-1, 1), max_size=30), st.floats(0.0, 0.9), st.floats(0.01, 0.5))
def test_partition_is_exclusive_and_total(sims, tau2, gap):
    part = partition_from_similarity(sims, tau2 + gap, tau2)
    joined = sorted(part.positives + part.negatives + part.uncertain)
    assert joined == list(range(len(sims)))


def test_closed_forms():
    r = pg_loss([[1.0, 0.0]], [[0.0, 1.0]], 0.1)
    assert r.loss == pytest.approx(math.log1p(math.exp(-10.0)), abs=1e-15)
    assert r.loss == pytest.approx(4.53988992e-5, abs=1e-12)
    r = pg_loss([[1.0, 0.0], [1.0, 0.0]], [[2.0, 0.0]], 0.1)
    assert r.loss == pytest.approx(-math.log(2.0 / 3.0), abs=1e-9)
    assert r.loss == pytest.approx(0.405465, abs=1e-6)


def test_empty_sides_give_zero():
    r = pg_loss([[1.0, 2.0]], [], 0.1)
    assert r.loss == 0.0 and np.all(r.grad_positive == 0)
    r = pg_loss([], [[1.0, 2.0]], 0.1)
    assert r.loss == 0.0 and r.grad_negative.shape == (1, 2)
    with pytest.raises(ValueError):
        pg_loss([[1.0]], [[1.0]], 0.0)


def test_matches_brute_force(rng):
    for _ in range(50):
        pos, neg = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        assert abs(pg_loss(pos, neg, 0.1).loss - brute_force_pg(pos.tolist(), neg.tolist(), 0.1)) < 1e-12


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    eps = 1e-5
    for _ in range(100):
        d, n_p, n_n = rng.integers(1, 17), rng.integers(1, 6), rng.integers(1, 6)
        pos, neg = rng.normal(size=(n_p, d)), rng.normal(size=(n_n, d))
        res = pg_loss(pos, neg, 0.1)
        for arr, grad in ((pos, res.grad_positive), (neg, res.grad_negative)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                hi = pg_loss(pos, neg, 0.1).loss
                arr[idx] = old - eps
                lo = pg_loss(pos, neg, 0.1).loss
                arr[idx] = old
                num[idx] = (hi - lo) / (2 * eps)
            scale = max(np.abs(num).max(), np.abs(grad).max())
            err = 0.0 if scale == 0 else np.abs(num - grad).max() / scale
            assert err < 1e-6


def test_zero_norm_latent_has_zero_gradient():
    r = pg_loss([[1.0, 0.0], [0.0, 0.0]], [[0.5, 0.5]], 0.1)
    assert np.all(r.grad_positive[1] == 0)
    assert np.isfinite(r.loss)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_scale_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pos, neg = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    base = pg_loss(pos, neg, 0.1).loss
    scaled = pos * rng.uniform(0.1, 10, size=(3, 1))
    assert pg_loss(scaled, neg * 4.0, 0.1).loss == pytest.approx(base, rel=1e-10, abs=1e-14)
    assert pg_loss(pos[::-1], neg[[2, 0, 1]], 0.1).loss == pytest.approx(base, rel=1e-10, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.95, 0.9), st.floats(0.01, 0.05))
def test_more_negative_similarity_never_lowers_loss(c, dc):
    pos = [[1.0, 0.0]]

    def neg(c):
        return [[c, math.sqrt(1 - c * c)]]

    assert pg_loss(pos, neg(c + dc), 0.1).loss >= pg_loss(pos, neg(c), 0.1).loss


def test_all_modalities():
    rng = np.random.default_rng(3)
    lat = rng.normal(size=(4, 6))
    part = partition_from_similarity([0.95, 0.92, 0.5, 0.8])
    res = pg_loss_all_modalities({k: part for k in MODALITIES}, {Modality.V: lat, Modality.T: lat, Modality.F: lat * 2})
    assert res[Modality.V].loss == res[Modality.T].loss == pytest.approx(res[Modality.F].loss)
    no_neg = partition_from_similarity([0.95, 0.92, 0.8, 0.8])
    res = pg_loss_all_modalities({k: no_neg for k in MODALITIES}, {k: lat for k in MODALITIES})
    assert [res[k].loss for k in MODALITIES] == [0.0, 0.0, 0.0]
