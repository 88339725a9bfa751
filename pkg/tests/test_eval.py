import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseped.core import BBox
from sparseped.evaluation import (
    NoGroundTruth,
    ap50,
    ap50_bruteforce,
    evaluate,
    lamr_bruteforce,
    log_average_miss_rate,
    match_detections,
)


def random_instance(rng):
    n_img = int(rng.integers(1, 4))
    dets, gts = [], []
    budget_d, budget_g = int(rng.integers(0, 21)), int(rng.integers(1, 11))
    for i in range(n_img):
        nd = budget_d // n_img + (i < budget_d % n_img)
        ng = budget_g // n_img + (i < budget_g % n_img)
        g = [BBox(*rng.uniform(0, 30, 2), *rng.uniform(4, 12, 2)) for _ in range(ng)]
        d = []
        for _ in range(nd):
            if g and rng.random() < 0.6:
                b = g[int(rng.integers(len(g)))]
                box = BBox(b.x + rng.normal(0, 2), b.y + rng.normal(0, 2), b.w, b.h)
            else:
                box = BBox(*rng.uniform(0, 30, 2), *rng.uniform(4, 12, 2))
            # coarse scores so that ties occur
            d.append((box, float(rng.integers(0, 6)) / 5.0))
        dets.append(d)
        gts.append(g)
    return dets, gts


def test_greedy_matching_examples():
    gt = [BBox(0, 0, 10, 10)]
    tp, fp, missed = match_detections([(BBox(0, 0, 10, 9), 0.7)], gt)
    assert tp.tolist() == [True] and missed == 0
    tp, fp, _ = match_detections([(BBox(0, 0, 10, 10), 0.5), (BBox(0, 0, 10, 10), 0.9)], gt)
    assert tp.tolist() == [False, True] and fp.tolist() == [True, False]
    half = BBox(0, 0, 10, 10)
    exact = BBox(0, 0, 10, 5)  # IoU exactly 0.5
    assert match_detections([(exact, 1.0)], [half])[0].tolist() == [True]


def test_perfect_and_empty_detectors():
    gts = [[BBox(0, 0, 5, 10), BBox(20, 0, 5, 10)], [BBox(3, 3, 6, 12)]]
    perfect = [[(b, 1.0) for b in g] for g in gts]
    assert log_average_miss_rate(perfect, gts) == 0.0
    assert ap50(perfect, gts) == 1.0
    empty = [[], []]
    assert log_average_miss_rate(empty, gts) == 1.0
    assert ap50(empty, gts) == 0.0
    with pytest.raises(NoGroundTruth):
        ap50(perfect, [[], []])


def test_hand_computed_case():
    gts = [[BBox(0, 0, 10, 10)], [BBox(0, 0, 10, 10)]]
    dets = [[(BBox(0, 0, 10, 10), 0.9)], [(BBox(40, 40, 10, 10), 0.8)]]
    assert log_average_miss_rate(dets, gts) == pytest.approx(0.5, abs=1e-12)
    assert ap50(dets, gts) == pytest.approx(0.5, abs=1e-12)
    assert lamr_bruteforce(dets, gts) == pytest.approx(0.5, abs=1e-12)


def test_fast_paths_equal_bruteforce():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        dets, gts = random_instance(rng)
        assert abs(log_average_miss_rate(dets, gts) - lamr_bruteforce(dets, gts)) < 1e-9
        assert abs(ap50(dets, gts) - ap50_bruteforce(dets, gts)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_monotone_rescaling_invariance(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    warped = [[(b, math.exp(3 * s) - 7.0) for b, s in d] for d in dets]
    assert log_average_miss_rate(warped, gts) == pytest.approx(log_average_miss_rate(dets, gts), abs=1e-12)
    assert ap50(warped, gts) == pytest.approx(ap50(dets, gts), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_low_false_positive_never_helps(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    low = min([s for d in dets for _, s in d], default=0.0) - 1.0
    worse = [list(d) for d in dets]
    worse[0].append((BBox(500, 500, 5, 5), low))
    assert log_average_miss_rate(worse, gts) >= log_average_miss_rate(dets, gts) - 1e-12
    assert ap50(worse, gts) <= ap50(dets, gts) + 1e-12


def test_report_all_uses_union():
    gts = {0: [BBox(0, 0, 10, 10)], 1: [BBox(0, 0, 10, 10)], 2: [BBox(0, 0, 10, 10)]}
    dets = {0: [(BBox(0, 0, 10, 10), 0.9)], 2: [(BBox(50, 0, 10, 10), 0.3)]}
    rep = evaluate(dets, gts, {0: "day", 1: "night", 2: "night"})
    d = [dets.get(i, []) for i in range(3)]
    g = [gts[i] for i in range(3)]
    assert rep.lamr == log_average_miss_rate(d, g)
    assert rep.subsets["day"] == (0.0, 1.0)
    assert rep.subsets["night"][1] == 0.0
    assert "night" in rep.table() and set(rep.record()) >= {"lamr", "ap50", "subsets"}
