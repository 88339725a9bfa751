import numpy as np
import pytest

from sparseped.config import RunConfig
from sparseped.core import Modality, boxes_to_array, iou_matrix
from sparseped.detector import (
    AnchorGrid,
    DetectorParams,
    TeacherStudent,
    detect,
    detection_loss_and_grads,
    generate_pseudo_labels,
    log_spaced_sizes,
)
from sparseped.evaluation import log_average_miss_rate
from sparseped.synthdata import SceneParams, generate_scene
from sparseped.training import NonFiniteLoss, TrainState, fit, train_step

THREE = SceneParams(width=64, height=48, min_h=12, max_h=24, n_pedestrians=(3, 3))
HEIGHTS = (12.0, 17.0, 24.0)
SUPERVISED = dict(mpaw_enabled=False, ppe_enabled=False, apra_mode="off")


def _config(**kw):
    return RunConfig(lr=0.05, anchor_stride=4, anchor_heights=HEIGHTS, batch_size=1, **kw)


@pytest.mark.parametrize("modules", [SUPERVISED, {}], ids=["supervised", "all-on"])
def test_single_image_loss_decreases(modules):
    pair, anns = generate_scene(11, THREE)
    cfg = _config(**modules)
    state = TrainState.create(cfg, [pair], {pair.id: anns})
    losses = [train_step(state, [pair], cfg).losses.det_sum for _ in range(200)]
    blocks = np.array(losses).reshape(10, 20).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_supervised_reduction():
    pair, anns = generate_scene(4, THREE)
    cfg = _config(**SUPERVISED, lambda2=0.0)
    state = TrainState.create(cfg, [pair], {pair.id: anns})
    for _ in range(5):
        res = train_step(state, [pair], cfg)
        assert res.weights == {Modality.V: 1.0, Modality.T: 1.0, Modality.F: 1.0}
        assert res.losses.total == pytest.approx(sum(res.losses.det.values()), abs=1e-12)
        assert res.pseudo_labels == {pair.id: []}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_parameters_raise():
    pair, anns = generate_scene(4, THREE)
    cfg = _config()
    state = TrainState.create(cfg, [pair], {pair.id: anns})
    state.ts.student.arrays["head_F_score_b"][:] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_step(state, [pair], cfg)


def test_overfit_teacher_recovers_a_removed_box():
    pair, anns = generate_scene(11, THREE)
    grid = AnchorGrid(stride=4, sizes=log_spaced_sizes(12, 24))
    params = DetectorParams.init(0, 8)
    for _ in range(300):
        total = {}
        for path in "VTF":
            _, g = detection_loss_and_grads(params, pair, path, anns, grid)
            for k, v in g.items():
                total[k] = total.get(k, 0.0) + v
        params = DetectorParams({k: v - 0.3 * total[k] for k, v in params.arrays.items()})
    removed, kept = anns[0], anns[1:]
    pls = generate_pseudo_labels(TeacherStudent(params, params, 0.99), pair, kept, 0.5, grid)
    ious = iou_matrix(boxes_to_array([p.bbox for p in pls]), boxes_to_array([removed.bbox]))[:, 0]
    assert ious.max() >= 0.5
    assert np.all(iou_matrix(boxes_to_array([p.bbox for p in pls]), boxes_to_array([a.bbox for a in kept])) < 0.5)
    # the converged model is near perfect on the image it memorised
    dets = detect(params, pair, grid, score_thresh=0.05)
    assert log_average_miss_rate([dets], [[a.bbox for a in anns]]) < 0.05


def test_fit_is_deterministic_and_gt_never_shrinks():
    params = SceneParams(width=48, height=36, min_h=8, max_h=20, n_pedestrians=(2, 4))
    pairs, anns = [], {}
    for i in range(6):
        p, a = generate_scene(50 + i, params)
        p.id = i
        pairs.append(p)
        anns[i] = a
    cfg = RunConfig(epochs=3, batch_size=2, anchor_stride=4, anchor_heights=(8.0, 13.0, 20.0), lr=0.3,
                    score_thresh=0.3)
    runs = []
    for _ in range(2):
        recs = []
        st = fit(cfg, pairs, anns, on_record=recs.append)
        runs.append((st, recs))
    (a, ra), (b, rb) = runs
    assert np.array_equal(a.ts.student.flat(), b.ts.student.flat())
    assert ra == rb or all(str(x) == str(y) for x, y in zip(ra, rb))
    sizes = [r["store_size"] for r in ra if r["kind"] == "step"]
    assert sizes == sorted(sizes)
    totals = [r["gt_total"] for r in ra if r["kind"] == "epoch"]
    assert totals == sorted(totals)
