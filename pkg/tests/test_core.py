import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseped.core import (
    BBox,
    DimMismatch,
    EmptyCrop,
    FeatureMap,
    ImagePair,
    Modality,
    boxes_to_array,
    cosine,
    cosine_matrix,
    crop,
    crop_rect,
    gap,
    iou,
    iou_matrix,
    nms,
)
from sparseped.embed import ConvEmbedder, HandcraftedEmbedder, embed_patch

coord = st.floats(-50, 50, allow_nan=False)
size = st.floats(0.5, 40, allow_nan=False)
boxes = st.builds(BBox, coord, coord, size, size)


def test_iou_known_values():
    assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 10, 10)) == 0.0
    # half overlap: 50 / 150
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 3)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)


@given(st.lists(boxes, min_size=1, max_size=6), st.lists(boxes, min_size=1, max_size=6))
def test_iou_matrix_matches_scalar(a, b):
    m = iou_matrix(boxes_to_array(a), boxes_to_array(b))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(iou(x, y), abs=1e-12)


def test_nms_keeps_highest_and_breaks_ties_by_id():
    dets = [(BBox(0, 0, 10, 10), 0.9), (BBox(1, 0, 10, 10), 0.95), (BBox(40, 40, 5, 5), 0.3)]
    kept = nms(dets, 0.5)
    assert [s for _, s in kept] == [0.95, 0.3]
    tie = [(BBox(0, 0, 10, 10), 0.5), (BBox(1, 0, 10, 10), 0.5)]
    assert nms(tie, 0.5) == [tie[0]]
    assert nms(tie, 0.5, ids=[7, 3]) == [tie[1]]


@given(st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=12), st.floats(0.05, 0.95))
@settings(max_examples=60)
def test_nms_output_pairwise_below_threshold(dets, thr):
    kept = nms(dets, thr)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i][0], kept[j][0]) < thr


def test_crop_rounding_and_clipping():
    assert crop_rect(BBox(1.5, 2.49, 3.0, 3.0), 10, 10) == (2, 2, 5, 5)
    assert crop_rect(BBox(-4, -4, 8, 8), 10, 10) == (0, 0, 4, 4)
    with pytest.raises(EmptyCrop):
        crop_rect(BBox(20, 20, 3, 3), 10, 10)
    pair = ImagePair(np.random.default_rng(0).random((10, 12, 3)), np.zeros((10, 12, 1)))
    c = crop(pair, BBox(2, 3, 4, 5), Modality.V)
    assert c.shape == (5, 4, 3)
    np.testing.assert_array_equal(c, pair.visible[3:8, 2:6])


def test_cosine_edge_cases(rng):
    a = rng.normal(size=8)
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert cosine(np.zeros(8), a) == 0.0
    with pytest.raises(DimMismatch):
        cosine(a, np.ones(3))


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4),
       st.floats(1e-3, 1e3))
def test_cosine_bounds_and_scale_invariance(a, b, lam):
    a, b = np.array(a), np.array(b)
    c = cosine(a, b)
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert cosine(lam * a, b) == pytest.approx(c, abs=1e-12)


def test_cosine_matrix_matches_scalar(rng):
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
    m = cosine_matrix(a, b)
    assert m[2, 3] == pytest.approx(cosine(a[2], b[3]), abs=1e-14)


def test_gap_linear(rng):
    x, y = rng.normal(size=(4, 5, 6)), rng.normal(size=(4, 5, 6))
    np.testing.assert_allclose(gap(2.0 * x - 3.0 * y), 2.0 * gap(x) - 3.0 * gap(y), atol=1e-12)
    with pytest.raises(FloatingPointError):
        FeatureMap(np.full((1, 2, 2), np.nan))


def test_handcrafted_zero_patch_gives_zero_map():
    fm = embed_patch(np.zeros((6, 4, 3)), np.zeros((6, 4, 1)), "F", HandcraftedEmbedder())
    assert fm.channels == (3 + 5) + (1 + 5)
    assert np.all(fm.values == 0)


def test_handcrafted_channel_means_are_statistics(rng):
    patch = rng.random((7, 5, 1))
    fm = HandcraftedEmbedder().feature_map(patch, "T")
    g = gap(fm)
    assert g[0] == pytest.approx(patch.mean())
    assert g[-1] == pytest.approx(patch[:, :, 0].var())


def test_conv_embedder_deterministic_and_fusion_is_concatenation(rng):
    emb = ConvEmbedder.init(np.random.default_rng(3), channels=4)
    pv, pt = rng.random((9, 7, 3)), rng.random((9, 7, 1))
    f = embed_patch(pv, pt, "F", emb).values
    np.testing.assert_array_equal(f, embed_patch(pv, pt, "F", emb).values)
    np.testing.assert_array_equal(f[:4], emb.feature_map(pv, "FV"))
    np.testing.assert_array_equal(f[4:], emb.feature_map(pt, "FT"))
    # a crop narrower than the kernel is padded to one valid output
    assert emb.feature_map(pv[:1, :2], "FV").shape == (4, 1, 1)
