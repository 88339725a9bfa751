import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseped.core import Annotation, BBox, ImagePair
from sparseped.sparsify import TargetUnreachable, calc_removal_probs, sparsify_dataset
from sparseped.synthdata import Dataset, SceneParams, generate_dataset


def _dataset(box_lists):
    pairs = [ImagePair(np.zeros((8, 8, 3)), np.zeros((8, 8, 1)), "day", i) for i in range(len(box_lists))]
    anns, k = {}, 0
    for i, sizes in enumerate(box_lists):
        anns[i] = []
        for w, h in sizes:
            anns[i].append(Annotation(BBox(0, 0, w, h), id=k))
            k += 1
    return Dataset(pairs, anns)


def test_removal_probs():
    np.testing.assert_allclose(calc_removal_probs([3.0, 3.0]), [0.5, 0.5])
    np.testing.assert_allclose(calc_removal_probs([100, 50, 200]), [0.2857, 0.5714, 0.1429], atol=1e-4)
    assert calc_removal_probs([7.0]).tolist() == [1.0]
    with pytest.raises(ValueError):
        calc_removal_probs([1.0, 0.0])


@given(st.lists(st.floats(1e-3, 1e4), min_size=1, max_size=30))
def test_removal_probs_normalized(areas):
    assert abs(calc_removal_probs(areas).sum() - 1.0) < 1e-12


def test_zero_fraction_is_identity():
    ds = generate_dataset(1, 5)
    out, log = sparsify_dataset(ds, 0.0)
    assert out.annotations == ds.annotations and log.removed == []


def test_smallest_box_removed_first():
    ds = _dataset([[(10, 20), (5, 10), (10, 10)], [(1, 1)], [(2, 2)]])
    out, log = sparsify_dataset(ds, 0.2)  # floor(0.2 * 5) = 1
    assert [a for _, a, _ in log.removed] == [1]
    assert log.removed[0][2] == 50


def test_area_ties_go_to_lower_id():
    ds = _dataset([[(5, 5), (5, 5), (9, 9)]])
    _, log = sparsify_dataset(ds, 0.34)
    assert log.removed[0][1] == 0


def test_single_box_images_unreachable():
    ds = _dataset([[(4, 4)]] * 6)
    with pytest.warns(TargetUnreachable):
        out, log = sparsify_dataset(ds, 0.3)
    assert log.achieved_count == 0 and not log.reached
    assert "warning=TargetUnreachable" in log.report()


def test_thousand_annotation_contract():
    p = SceneParams(width=96, height=72, min_h=8, max_h=28, n_pedestrians=(2, 8))
    ds = generate_dataset(4, 400, p)
    # trim to exactly 1000 annotations, keeping every image non-empty
    total, keep = 0, {}
    for i in ds.image_ids:
        room = 1000 - total
        if room <= 0:
            break
        keep[i] = ds.annotations[i][:room]
        total += len(keep[i])
    pairs = [ds.pair(i) for i in keep]
    ds = Dataset(pairs, keep)
    assert ds.total_annotations() == 1000
    before = {k: list(v) for k, v in ds.annotations.items()}
    out, log = sparsify_dataset(ds, 0.3)
    assert log.achieved_count == 300 == math.floor(0.3 * 1000)
    assert all(len(v) >= 1 for v in out.annotations.values())
    removed = [a for _, _, a in log.removed]
    kept = [a.bbox.area for v in out.annotations.values() for a in v]
    assert np.mean(removed) < np.mean(kept)
    assert ds.annotations == before  # input untouched
    again, log2 = sparsify_dataset(ds, 0.3)
    assert again.annotations == out.annotations and log2.removed == log.removed


@given(st.lists(st.lists(st.tuples(st.integers(1, 20), st.integers(1, 20)), min_size=1, max_size=5),
                min_size=1, max_size=8), st.floats(0.01, 0.99))
@settings(max_examples=80)
def test_sparsify_invariants(boxes, frac):
    ds = _dataset(boxes)
    total = ds.total_annotations()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TargetUnreachable)
        out, log = sparsify_dataset(ds, frac)
    assert log.achieved_count <= math.floor(frac * total)
    removable = sum(len(b) - 1 for b in boxes)
    assert log.achieved_count == min(math.floor(frac * total), removable)
    assert all(len(v) >= 1 for v in out.annotations.values())
    assert out.total_annotations() == total - log.achieved_count


def test_random_mode_respects_guard():
    ds = generate_dataset(2, 30)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TargetUnreachable)
        out, log = sparsify_dataset(ds, 0.5, seed=3, mode="random")
    assert all(len(v) >= 1 for v in out.annotations.values())
    with pytest.raises(ValueError):
        sparsify_dataset(ds, 1.0)
