"""Log-average miss rate over FPPI in [1e-2, 1] and AP at IoU 0.5.

Both metrics are evaluated only at distinct score thresholds (tied scores
enter together), which makes them invariant to monotone score rescaling.
``lamr_bruteforce`` / ``ap50_bruteforce`` recompute every operating point
from scratch and serve as oracles for the sweep implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .core import BBox, boxes_to_array, iou_matrix

MR_FLOOR = 1e-10
REPORT_ZERO_BELOW = 1e-9


class NoGroundTruth(ValueError):
    pass


Detections = Sequence[Tuple[BBox, float]]


def fppi_points(n: int = 9) -> np.ndarray:
    return np.logspace(-2.0, 0.0, n)


def match_detections(dets: Detections, gts: Sequence[BBox], iou_thresh: float = 0.5):
    """Greedy one-to-one matching; dets are visited by descending score, ties by index.

    Returns (tp flags, fp flags, n_missed) aligned with the input order.
    """
    n = len(dets)
    tp = np.zeros(n, dtype=bool)
    if n == 0:
        return tp, ~tp, len(gts)
    scores = np.array([s for _, s in dets], dtype=np.float64)
    order = np.lexsort((np.arange(n), -scores))
    if len(gts):
        ious = iou_matrix(boxes_to_array([b for b, _ in dets]), boxes_to_array(list(gts)))
        free = np.ones(len(gts), dtype=bool)
        for i in order:
            cand = np.where(free & (ious[i] >= iou_thresh), ious[i], -1.0)
            j = int(cand.argmax())
            if cand[j] >= 0:
                tp[i] = True
                free[j] = False
        missed = int(free.sum())
    else:
        missed = 0
    return tp, ~tp, missed


def _operating_points(per_image_dets: Sequence[Detections], per_image_gts: Sequence[Sequence[BBox]]):
    """Cumulative (tp, fp) after each distinct score threshold, highest first."""
    scores, flags = [], []
    for dets, gts in zip(per_image_dets, per_image_gts):
        tp, _, _ = match_detections(dets, gts)
        scores.extend(s for _, s in dets)
        flags.extend(tp)
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    ctp = np.cumsum(flags)
    cfp = np.cumsum(~flags)
    # last index of every tie group
    if len(scores):
        last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    else:
        last = np.zeros(0, dtype=int)
    return ctp[last], cfp[last], scores[last]


def _count_gt(per_image_gts) -> int:
    n = sum(len(g) for g in per_image_gts)
    if n == 0:
        raise NoGroundTruth("metric undefined without ground truth")
    return n


def _lamr_from_curve(fppi: np.ndarray, mr: np.ndarray, refs: np.ndarray) -> float:
    vals = []
    for r in refs:
        ok = fppi <= r
        # the most permissive threshold still within the FPPI budget has the lowest miss rate
        vals.append(mr[ok].min() if np.any(ok) else 1.0)
    lamr = float(np.exp(np.mean(np.log(np.maximum(vals, MR_FLOOR)))))
    return 0.0 if lamr < REPORT_ZERO_BELOW else lamr


def miss_rate_curve(per_image_dets, per_image_gts):
    n_gt = _count_gt(per_image_gts)
    n_img = len(per_image_gts)
    ctp, cfp, _ = _operating_points(per_image_dets, per_image_gts)
    fppi = np.concatenate([[0.0], cfp / n_img])
    mr = np.concatenate([[1.0], 1.0 - ctp / n_gt])
    return fppi, mr


def log_average_miss_rate(per_image_dets, per_image_gts, n_points: int = 9) -> float:
    if len(per_image_gts) < 1:
        raise ValueError("need at least one image")
    fppi, mr = miss_rate_curve(per_image_dets, per_image_gts)
    return _lamr_from_curve(fppi, mr, fppi_points(n_points))


def precision_recall_curve(per_image_dets, per_image_gts):
    n_gt = _count_gt(per_image_gts)
    ctp, cfp, _ = _operating_points(per_image_dets, per_image_gts)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def _ap_from_curve(recall: np.ndarray, precision: np.ndarray) -> float:
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def ap50(per_image_dets, per_image_gts) -> float:
    recall, precision = precision_recall_curve(per_image_dets, per_image_gts)
    return _ap_from_curve(recall, precision)


# ---------------------------------------------------------------- oracles


def _thresholds(per_image_dets) -> List[float]:
    return sorted({s for dets in per_image_dets for _, s in dets}, reverse=True)


def _point_at(per_image_dets, per_image_gts, thr: float):
    tp = fp = 0
    for dets, gts in zip(per_image_dets, per_image_gts):
        kept = [d for d in dets if d[1] >= thr]
        t, f, _ = match_detections(kept, gts)
        tp += int(t.sum())
        fp += int(f.sum())
    return tp, fp


def lamr_bruteforce(per_image_dets, per_image_gts, n_points: int = 9) -> float:
    n_gt = _count_gt(per_image_gts)
    n_img = len(per_image_gts)
    points = [(0.0, 1.0)]  # threshold above every score: nothing detected
    for thr in _thresholds(per_image_dets):
        tp, fp = _point_at(per_image_dets, per_image_gts, thr)
        points.append((fp / n_img, 1.0 - tp / n_gt))
    vals = []
    for r in fppi_points(n_points):
        admissible = [mr for f, mr in points if f <= r]
        vals.append(min(admissible) if admissible else 1.0)
    lamr = float(np.exp(np.mean([np.log(max(v, MR_FLOOR)) for v in vals])))
    return 0.0 if lamr < REPORT_ZERO_BELOW else lamr


def ap50_bruteforce(per_image_dets, per_image_gts) -> float:
    n_gt = _count_gt(per_image_gts)
    pts = []
    for thr in _thresholds(per_image_dets):
        tp, fp = _point_at(per_image_dets, per_image_gts, thr)
        pts.append((tp / n_gt, tp / (tp + fp) if tp + fp else 0.0))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(pts):
        best_p = max(p for _, p in pts[i:])
        ap += (r - prev_r) * best_p
        prev_r = r
    return ap


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    lamr: float
    ap50: float
    subsets: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    mr_curve: List[Tuple[float, float]] = field(default_factory=list)
    pr_curve: List[Tuple[float, float]] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'subset':<8}{'LAMR':>10}{'AP50':>10}"]
        for name in ("all", "day", "night"):
            if name in self.subsets:
                lamr, ap = self.subsets[name]
                lines.append(f"{name:<8}{_fmt(lamr):>10}{_fmt(ap):>10}")
        return "\n".join(lines) + "\n"

    def record(self) -> dict:
        return {
            "lamr": self.lamr,
            "ap50": self.ap50,
            "subsets": {k: {"lamr": v[0], "ap50": v[1]} for k, v in self.subsets.items()},
            "mr_curve": [list(p) for p in self.mr_curve],
            "pr_curve": [list(p) for p in self.pr_curve],
        }


def _fmt(v) -> str:
    return "n/a" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:.2f}"


def evaluate(per_image_dets: Mapping[int, Detections], per_image_gts: Mapping[int, Sequence[BBox]],
             daynight: Mapping[int, str], n_points: int = 9) -> EvalReport:
    """All / day / night report; ``all`` pools every image rather than averaging subsets."""
    ids = sorted(per_image_gts)

    def metrics(sel):
        d = [per_image_dets.get(i, []) for i in sel]
        g = [per_image_gts[i] for i in sel]
        try:
            return log_average_miss_rate(d, g, n_points), ap50(d, g)
        except (NoGroundTruth, ValueError):
            return float("nan"), float("nan")

    subsets = {"all": metrics(ids)}
    for name in ("day", "night"):
        sel = [i for i in ids if daynight[i] == name]
        if sel:
            subsets[name] = metrics(sel)
    d = [per_image_dets.get(i, []) for i in ids]
    g = [per_image_gts[i] for i in ids]
    fppi, mr = miss_rate_curve(d, g)
    rec, prec = precision_recall_curve(d, g)
    lamr, ap = subsets["all"]
    return EvalReport(lamr, ap, subsets, list(zip(fppi.tolist(), mr.tolist())),
                      list(zip(rec.tolist(), prec.tolist())))
