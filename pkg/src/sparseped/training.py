"""Teacher-student training step and loop.

One step over a mini-batch, per image in id order:

1. retrieval augmentation of the pair (if enabled)
2. teacher fusion-path pseudo-labels
3. student features and pooled latents for anchors, pseudo-labels and GT
4. per-modality similarity weights, averaged over the batch
5. pseudo-label partition and contrastive loss per modality
6. SGD on the student, 7. EMA teacher update,
8. promotion of confident pseudo-labels to persistent GT (dynamic mode)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import apra
from .config import RunConfig
from .core import MODALITIES, Annotation, ImagePair, Modality, boxes_to_array
from .detector import (
    PATH_STREAMS,
    AnchorGrid,
    DetectorParams,
    ImageFeatures,
    NonFiniteLoss,
    PseudoLabel,
    TeacherStudent,
    add_scaled,
    assign_anchors,
    detect,
    detection_loss,
    ema_update,
    forward,
    head_backward,
    teacher_candidates,
    window_rects,
)
from .evaluation import EvalReport, evaluate
from .mpaw import ModalityWeights, batch_mean_weights, compute_weights
from .ppe import QualityPartition, classify, pg_loss

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    cls: Dict[Modality, float]
    loc: Dict[Modality, float]
    det: Dict[Modality, float]
    det_sum: float
    pg: Dict[Modality, float]
    total: float

    def check_finite(self) -> None:
        for name, vals in (("L_cls", self.cls), ("L_loc", self.loc), ("L_PG", self.pg)):
            for k, v in vals.items():
                if not math.isfinite(v):
                    raise NonFiniteLoss(f"{name}^{k.value}", v)
        for name, v in (("L_det_sum", self.det_sum), ("L_total", self.total)):
            if not math.isfinite(v):
                raise NonFiniteLoss(name, v)


@dataclass
class TrainState:
    ts: TeacherStudent
    gt: Dict[int, List[Annotation]]
    store: apra.ExemplarStore
    global_mean: tuple
    grid: AnchorGrid
    step: int = 0
    next_annotation_id: int = 0
    refine_log: List[apra.RefineEvent] = field(default_factory=list)

    @classmethod
    def create(cls, config: RunConfig, pairs: Sequence[ImagePair], annotations) -> "TrainState":
        ts = TeacherStudent.init(config.seed, config.channels, config.ema_momentum, len(config.anchor_heights))
        gt = {p.id: list(annotations.get(p.id, [])) for p in pairs}
        store = apra.ExemplarStore()
        if config.apra_mode != "off":
            store = apra.ExemplarStore.from_ground_truth(pairs, gt)
        all_ids = [a.id for v in gt.values() for a in v]
        try:
            gmean = apra.global_mean_size(gt)
        except ValueError:
            gmean = (config.anchor_heights[0] * config.anchor_aspect, config.anchor_heights[0])
        grid = AnchorGrid(config.anchor_stride, config.anchor_sizes())
        return cls(ts, gt, store, gmean, grid, 0, (max(all_ids) + 1) if all_ids else 0)


@dataclass
class ImageStep:
    """Per-image intermediate results of one step."""

    pair: ImagePair
    aug: apra.AugmentResult
    features: ImageFeatures
    gt_rects: np.ndarray
    pseudo: List[PseudoLabel]
    pl_rects: np.ndarray
    weights: ModalityWeights
    partitions: Dict[Modality, QualityPartition]
    teacher_features: Optional[ImageFeatures] = None


@dataclass
class StepResult:
    ts: TeacherStudent
    losses: LossBreakdown
    pseudo_labels: Dict[int, List[PseudoLabel]]
    weights: Dict[Modality, float]
    teacher_weight_f: float
    partition_counts: tuple
    refined: List[apra.RefineEvent]
    placed: int

    def record(self, step: int, store_size: int) -> dict:
        lb = self.losses
        rec = {"kind": "step", "step": step, "L_total": lb.total, "L_det_sum": lb.det_sum}
        for k in MODALITIES:
            rec[f"L_det_{k.value}"] = lb.det[k]
            rec[f"L_PG_{k.value}"] = lb.pg[k]
        for k in MODALITIES:
            rec[f"w_{k.value}"] = self.weights[k]
        rec["w_F_teacher"] = self.teacher_weight_f
        rec["N_p"], rec["N_n"], rec["N_uncertain"] = self.partition_counts
        rec["n_pseudo"] = sum(len(v) for v in self.pseudo_labels.values())
        rec["apra_placed"] = self.placed
        rec["refined"] = len(self.refined)
        rec["store_size"] = store_size
        return rec


def _latents(features: ImageFeatures, rects: np.ndarray) -> Dict[Modality, np.ndarray]:
    return {k: features.pool(k, rects) for k in MODALITIES}


def _prepare(state: TrainState, pair: ImagePair, config: RunConfig) -> ImageStep:
    anns = state.gt[pair.id]
    if config.apra_mode != "off":
        aug = apra.augment(pair, anns, state.store, state.global_mean, config.m, config.placement_stride)
    else:
        aug = apra.AugmentResult(pair, list(anns), [])
    ipair = aug.pair
    gt_boxes = boxes_to_array([a.bbox for a in aug.annotations])
    feats = ImageFeatures(state.ts.student, ipair)
    gt_rects = window_rects(gt_boxes, ipair.width, ipair.height)
    pseudo: List[PseudoLabel] = []
    tfeat = None
    if config.uses_pseudo_labels and state.step >= config.burn_in_steps:
        tfeat = ImageFeatures(state.ts.teacher, ipair, PATH_STREAMS[Modality.F], feats.inputs)
        cands = teacher_candidates(state.ts.teacher, ipair, gt_boxes, state.grid, config.score_thresh,
                                   config.nms_iou, tfeat, config.pl_gt_iou)
        pseudo = [PseudoLabel(b, s) for b, s in cands]
    pl_rects = window_rects(boxes_to_array([p.bbox for p in pseudo]), ipair.width, ipair.height)
    gt_lat = _latents(feats, gt_rects)
    weights = ModalityWeights.unit()
    partitions = {}
    if pseudo:
        pl_lat = _latents(feats, pl_rects)
        for i, p in enumerate(pseudo):
            p.latents = {k: pl_lat[k][i] for k in MODALITIES}
        weights = compute_weights(pl_lat, gt_lat)
        if config.ppe_enabled:
            partitions = {k: classify(pl_lat[k], gt_lat[k], config.tau1, config.tau2) for k in MODALITIES}
            for i, p in enumerate(pseudo):
                p.quality = partitions[Modality.F].label(i)
    return ImageStep(pair, aug, feats, gt_rects, pseudo, pl_rects, weights, partitions, tfeat)


def _teacher_weight_f(state: TrainState, item: ImageStep) -> float:
    if not item.pseudo:
        return float("nan")
    tfeat = item.teacher_features
    if tfeat is None:
        tfeat = ImageFeatures(state.ts.teacher, item.aug.pair, PATH_STREAMS[Modality.F])
    t_pl = tfeat.pool(Modality.F, item.pl_rects)
    t_gt = tfeat.pool(Modality.F, item.gt_rects)
    return float(compute_weights({k: t_pl for k in MODALITIES}, {k: t_gt for k in MODALITIES}).raw[Modality.F])


def _targets(item: ImageStep, k: Modality, config: RunConfig):
    """Detection targets and ignore boxes for one path.

    Without the partition every pseudo-label is a target; with it only
    positives are, uncertain ones are ignored and negatives stay background.
    """
    gt_boxes = boxes_to_array([a.bbox for a in item.aug.annotations])
    if not item.pseudo:
        return gt_boxes, None
    pl_boxes = boxes_to_array([p.bbox for p in item.pseudo])
    if not item.partitions:
        return np.concatenate([gt_boxes, pl_boxes]), None
    part = item.partitions[k]
    tgt = np.concatenate([gt_boxes, pl_boxes[part.positives]]) if part.positives else gt_boxes
    ign = pl_boxes[part.uncertain] if part.uncertain else None
    return tgt, ign


def train_step(state: TrainState, batch: Sequence[ImagePair], config: RunConfig,
               log_teacher_weights: bool = True) -> StepResult:
    """One optimizer step over ``batch``; mutates ``state`` and returns the step summary."""
    batch = sorted(batch, key=lambda p: p.id)
    n = len(batch)
    items = [_prepare(state, p, config) for p in batch]
    if config.mpaw_enabled:
        wbar = batch_mean_weights([it.weights for it in items])
    else:
        wbar = {k: 1.0 for k in MODALITIES}

    grads: Dict[str, np.ndarray] = {}
    cls = {k: 0.0 for k in MODALITIES}
    loc = {k: 0.0 for k in MODALITIES}
    pg = {k: 0.0 for k in MODALITIES}
    student = state.ts.student
    for it in items:
        ipair = it.aug.pair
        for k in MODALITIES:
            out = forward(student, ipair, k, state.grid, it.features)
            tgt, ign = _targets(it, k, config)
            dl = detection_loss(out, tgt, assignment=assign_anchors(out.anchors, tgt, ign))
            cls[k] += dl.cls / n
            loc[k] += dl.loc / n
            scale = config.lambda1 * wbar[k] / n
            hg, rects, g_all = head_backward(student, out, dl.grad_logits * scale, dl.grad_offsets * scale)
            add_scaled(grads, hg)
            if config.ppe_enabled and it.partitions:
                part = it.partitions[k]
                if part.positives and part.negatives:
                    lat = np.stack([p.latents[k] for p in it.pseudo])
                    res = pg_loss(lat[part.positives], lat[part.negatives], config.tau)
                    pg[k] += res.loss / n
                    g_pl = np.zeros_like(lat)
                    g_pl[part.positives] = res.grad_positive
                    g_pl[part.negatives] += res.grad_negative
                    rects = np.concatenate([rects, it.pl_rects])
                    g_all = np.concatenate([g_all, g_pl * (config.lambda2 / n)])
            add_scaled(grads, it.features.backward(k, rects, g_all))

    det = {k: cls[k] + loc[k] for k in MODALITIES}
    det_sum = float(sum(wbar[k] * det[k] for k in MODALITIES))
    total = config.lambda1 * det_sum + config.lambda2 * float(sum(pg.values()))
    losses = LossBreakdown(cls, loc, det, det_sum, pg, total)
    losses.check_finite()

    new_student = DetectorParams({k: v - config.lr * grads.get(k, 0.0) for k, v in student.arrays.items()})
    if not new_student.is_finite():
        raise NonFiniteLoss("student parameters")
    ts = ema_update(TeacherStudent(state.ts.teacher, new_student, state.ts.ema_momentum))

    teacher_wf = float("nan")
    if log_teacher_weights:
        vals = [_teacher_weight_f(state, it) for it in items if it.pseudo]
        teacher_wf = float(np.mean(vals)) if vals else float("nan")

    refined: List[apra.RefineEvent] = []
    if config.apra_mode == "dynamic":
        for it in items:
            ev = apra.dynamic_refine(it.pseudo, it.weights, config.tau1, it.pair, state.gt[it.pair.id],
                                     state.store, state.next_annotation_id, config.refine_strict_all,
                                     exclude=it.aug.placed)
            state.next_annotation_id += len(ev)
            refined.extend(ev)
    state.refine_log.extend(refined)
    state.ts = ts
    state.step += 1

    counts = [0, 0, 0]
    for it in items:
        if it.partitions:
            for j, c in enumerate(it.partitions[Modality.F].counts):
                counts[j] += c
    return StepResult(ts, losses, {it.pair.id: it.pseudo for it in items}, wbar, teacher_wf,
                      tuple(counts), refined, sum(len(it.aug.placed) for it in items))


def evaluate_model(params: DetectorParams, pairs: Sequence[ImagePair], annotations, grid: AnchorGrid,
                   config: RunConfig) -> EvalReport:
    """Student fusion-path inference on un-augmented images."""
    dets, gts, dn = {}, {}, {}
    for pair in pairs:
        dets[pair.id] = detect(params, pair, grid, Modality.F, config.eval_score_thresh, config.nms_iou)
        gts[pair.id] = [a.bbox for a in annotations.get(pair.id, [])]
        dn[pair.id] = pair.daynight
    return evaluate(dets, gts, dn, config.fppi_points)


def epoch_batches(ids: Sequence[int], batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    rng = np.random.default_rng([seed, epoch])
    order = list(np.asarray(sorted(ids))[rng.permutation(len(ids))])
    return [[int(i) for i in order[j:j + batch_size]] for j in range(0, len(order), batch_size)]


def fit(config: RunConfig, train_pairs: Sequence[ImagePair], train_annotations,
        test_pairs: Optional[Sequence[ImagePair]] = None, test_annotations=None,
        on_record: Optional[Callable[[dict], None]] = None, eval_every_epoch: bool = True) -> TrainState:
    state = TrainState.create(config, train_pairs, train_annotations)
    by_id = {p.id: p for p in train_pairs}
    emit = on_record or (lambda r: None)
    for epoch in range(config.epochs):
        for batch_ids in epoch_batches(list(by_id), config.batch_size, config.seed, epoch):
            res = train_step(state, [by_id[i] for i in batch_ids], config)
            rec = res.record(state.step, len(state.store))
            rec["epoch"] = epoch
            emit(rec)
        gt_total = sum(len(v) for v in state.gt.values())
        epoch_rec = {"kind": "epoch", "epoch": epoch, "step": state.step, "gt_total": gt_total,
                     "store_size": len(state.store)}
        if test_pairs is not None and eval_every_epoch:
            rep = evaluate_model(state.ts.student, test_pairs, test_annotations, state.grid, config)
            for name, (lamr, ap) in rep.subsets.items():
                epoch_rec[f"lamr_{name}"] = lamr
                epoch_rec[f"ap50_{name}"] = ap
        emit(epoch_rec)
    return state
