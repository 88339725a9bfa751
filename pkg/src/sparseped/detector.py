"""Toy three-path (visible / thermal / fusion) anchor detector with analytic gradients.

Every path embeds the whole image once (valid 3x3 conv + tanh per input
stream) and pools anchor, pseudo-label and ground-truth windows from the
resulting map with an integral image. The heads see each anchor's box mean
together with the mean over a surrounding ring, so a box can be scored
against its own context. Backpropagation scatters window
gradients back through a 2-D difference array, so the cost of a step is
independent of how many windows are pooled.
"""

from __future__ import annotations

import io
import json
import struct
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import Annotation, BBox, ImagePair, Modality, MODALITIES, boxes_to_array, iou_matrix, nms_indices
from .embed import KERNEL, STREAM_INPUT_CHANNELS, ConvEmbedder, im2col

PATH_STREAMS = {Modality.V: ("V",), Modality.T: ("T",), Modality.F: ("FV", "FT")}
POS_IOU = 0.5
NEG_IOU = 0.4
NEG_RATIO = 3
MAX_LOG_SCALE = 4.0
CONTEXT_GROWTH = 0.5  # context window = box grown by this fraction of its size
CKPT_MAGIC = b"SAMPDCKPT1"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, value=None):
        super().__init__(f"non-finite loss component {component}: {value}")
        self.component = component


# ---------------------------------------------------------------- anchors


@dataclass(frozen=True)
class AnchorGrid:
    stride: int = 8
    sizes: Tuple[Tuple[float, float], ...] = ((5.5, 13.0), (9.0, 21.0), (14.5, 34.0))

    def __post_init__(self):
        if self.stride < 1 or len(self.sizes) < 1:
            raise ValueError("anchor grid needs stride >= 1 and at least one template")

    def anchors(self, width: int, height: int) -> np.ndarray:
        """(N, 4) x, y, w, h anchors; cell-major, template-minor order."""
        ny = max(int(np.ceil(height / self.stride)), 1)
        nx = max(int(np.ceil(width / self.stride)), 1)
        cy = (np.arange(ny) + 0.5) * self.stride
        cx = (np.arange(nx) + 0.5) * self.stride
        gy, gx = np.meshgrid(cy, cx, indexing="ij")
        sizes = np.asarray(self.sizes, dtype=np.float64)
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        c = np.repeat(centers, len(sizes), axis=0)
        s = np.tile(sizes, (len(centers), 1))
        return np.concatenate([c - s / 2.0, s], axis=1)


def log_spaced_sizes(min_h: float, max_h: float, n: int = 3, aspect: float = 0.42):
    hs = np.exp(np.linspace(np.log(min_h), np.log(max_h), n + 2)[1:-1]) if n > 1 else [np.sqrt(min_h * max_h)]
    return tuple((float(h * aspect), float(h)) for h in hs)


# ---------------------------------------------------------------- parameters


@dataclass
class DetectorParams:
    arrays: Dict[str, np.ndarray]

    @classmethod
    def init(cls, seed: int, channels: int = 8, head_scale: float = 0.0,
             score_prior: float = 1.0 / (1 + NEG_RATIO), n_templates: int = 3) -> "DetectorParams":
        """Random embedder, zero head weights; the score bias starts at the logit of ``score_prior``.

        Heads hold one row per anchor template, like per-default-box
        classifier channels.
        """
        rng = np.random.default_rng(seed)
        emb = ConvEmbedder.init(rng, channels)
        arrays: Dict[str, np.ndarray] = {}
        for s, (w, b) in emb.weights.items():
            arrays[f"conv_{s}_w"] = w
            arrays[f"conv_{s}_b"] = b
        for k in MODALITIES:
            # heads read the box latent followed by the surrounding-ring latent
            d = 2 * channels * len(PATH_STREAMS[k])
            t = n_templates
            arrays[f"head_{k.value}_score_w"] = rng.normal(0, 1, (t, d)) * head_scale
            arrays[f"head_{k.value}_score_b"] = np.full(t, np.log(score_prior / (1.0 - score_prior)))
            arrays[f"head_{k.value}_box_w"] = rng.normal(0, 1, (t, 4, d)) * head_scale
            arrays[f"head_{k.value}_box_b"] = np.zeros((t, 4))
        return cls(arrays)

    def names(self) -> List[str]:
        return sorted(self.arrays)

    def copy(self) -> "DetectorParams":
        return DetectorParams({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "DetectorParams":
        return DetectorParams({k: np.zeros_like(v) for k, v in self.arrays.items()})

    def embedder(self) -> ConvEmbedder:
        return ConvEmbedder({s: (self.arrays[f"conv_{s}_w"], self.arrays[f"conv_{s}_b"])
                             for s in STREAM_INPUT_CHANNELS})

    def latent_dim(self, path) -> int:
        return self.arrays[f"head_{Modality(path).value}_score_w"].shape[1] // 2

    @property
    def n_templates(self) -> int:
        return self.arrays["head_F_score_w"].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def with_flat(self, vec: np.ndarray) -> "DetectorParams":
        out, i = {}, 0
        for k in self.names():
            a = self.arrays[k]
            out[k] = vec[i:i + a.size].reshape(a.shape).copy()
            i += a.size
        return DetectorParams(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def add_scaled(target: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], scale: float = 1.0):
    for k, g in grads.items():
        if k in target:
            target[k] = target[k] + scale * g
        else:
            target[k] = scale * g


# ---------------------------------------------------------------- features

def window_rects(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    """Integer feature-map rectangles (r0, r1, c0, c1) pooled for each box.

    The pixel crop uses round-half-up and is clipped to the image; crops
    thinner than the kernel are widened inside the image so the valid
    convolution has at least one output.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0 = np.clip(np.floor(boxes[:, 0] + 0.5), 0, width).astype(int)
    y0 = np.clip(np.floor(boxes[:, 1] + 0.5), 0, height).astype(int)
    x1 = np.clip(np.floor(boxes[:, 0] + boxes[:, 2] + 0.5), 0, width).astype(int)
    y1 = np.clip(np.floor(boxes[:, 1] + boxes[:, 3] + 0.5), 0, height).astype(int)
    x0, x1 = _widen(x0, x1, width)
    y0, y1 = _widen(y0, y1, height)
    return np.stack([y0, y1 - KERNEL + 1, x0, x1 - KERNEL + 1], axis=1)


def context_boxes(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, :2] -= b[:, 2:] * (CONTEXT_GROWTH / 2.0)
    b[:, 2:] *= 1.0 + CONTEXT_GROWTH
    return b


def rect_counts(rects: np.ndarray) -> np.ndarray:
    return ((rects[:, 1] - rects[:, 0]) * (rects[:, 3] - rects[:, 2])).astype(np.float64)


def _widen(lo, hi, limit):
    short = hi - lo < KERNEL
    if np.any(short):
        mid = (lo + hi) // 2
        lo = np.where(short, np.clip(mid - 1, 0, limit - KERNEL), lo)
        hi = np.where(short, lo + KERNEL, hi)
    return lo, hi


class ImageFeatures:
    """Full-image activations of one parameter set on one image pair, per stream."""

    def __init__(self, params: DetectorParams, pair: ImagePair, streams: Iterable[str] = ("V", "T", "FV", "FT"),
                 inputs: Optional[Dict[str, np.ndarray]] = None):
        """``inputs`` reuses the im2col patches of another instance built on the same pair."""
        self.params = params
        self.width, self.height = pair.width, pair.height
        if self.width < KERNEL or self.height < KERNEL:
            raise ValueError("image smaller than the convolution kernel")
        if inputs is None:
            inputs = {"V": im2col(pair.visible.transpose(2, 0, 1) - 0.5),
                      "T": im2col(pair.thermal.transpose(2, 0, 1) - 0.5)}
        self.inputs = cols = inputs
        ho, wo = self.height - KERNEL + 1, self.width - KERNEL + 1
        self.cols, self.act, self.integral = {}, {}, {}
        for s in streams:
            w = params.arrays[f"conv_{s}_w"]
            b = params.arrays[f"conv_{s}_b"]
            c = cols["V" if s in ("V", "FV") else "T"]
            a = np.tanh(w.reshape(w.shape[0], -1) @ c + b[:, None]).reshape(w.shape[0], ho, wo)
            # channels-last so each window gathers one contiguous row per corner
            ii = np.zeros((ho + 1, wo + 1, a.shape[0]))
            ii[1:, 1:] = a.cumsum(axis=1).cumsum(axis=2).transpose(1, 2, 0)
            self.cols[s], self.act[s], self.integral[s] = c, a, ii

    def pool(self, path, rects: np.ndarray) -> np.ndarray:
        """(N, D) window means for ``path``; fusion concatenates V then T streams."""
        parts = []
        r0, r1, c0, c1 = rects[:, 0], rects[:, 1], rects[:, 2], rects[:, 3]
        count = ((r1 - r0) * (c1 - c0)).astype(np.float64)
        for s in PATH_STREAMS[Modality(path)]:
            ii = self.integral[s]
            tot = ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]
            parts.append(tot / count[:, None])
        return np.concatenate(parts, axis=1)

    def pool_ring(self, path, inner: np.ndarray, outer: np.ndarray,
                  inner_mean: Optional[np.ndarray] = None) -> np.ndarray:
        """Mean over ``outer`` minus ``inner``; zero where the ring is empty.

        ``inner_mean`` may pass in ``pool(path, inner)`` when already computed.
        """
        ci, co = rect_counts(inner), rect_counts(outer)
        den = co - ci
        if inner_mean is None:
            inner_mean = self.pool(path, inner)
        tot = self.pool(path, outer) * co[:, None] - inner_mean * ci[:, None]
        return np.where(den[:, None] > 0, tot / np.maximum(den, 1.0)[:, None], 0.0)

    def backward(self, path, rects: np.ndarray, grad_latent: np.ndarray) -> Dict[str, np.ndarray]:
        """Conv parameter gradients given dL/d(pooled latents) of ``path``."""
        grads = {}
        r0, r1, c0, c1 = rects[:, 0], rects[:, 1], rects[:, 2], rects[:, 3]
        count = ((r1 - r0) * (c1 - c0)).astype(np.float64)
        off = 0
        for s in PATH_STREAMS[Modality(path)]:
            a = self.act[s]
            ch, ho, wo = a.shape
            g = grad_latent[:, off:off + ch] / count[:, None]
            off += ch
            size = (ho + 1) * (wo + 1)
            chan = np.arange(ch)[None, :] * size
            diff = np.zeros(ch * size)
            # window adjoint: +g at (r0,c0) and (r1,c1), -g at (r0,c1) and (r1,c0)
            for ry, cx, sign in ((r0, c0, 1.0), (r0, c1, -1.0), (r1, c0, -1.0), (r1, c1, 1.0)):
                idx = (ry * (wo + 1) + cx)[:, None] + chan
                diff += sign * np.bincount(idx.ravel(), weights=g.ravel(), minlength=ch * size)
            diff = diff.reshape(ch, ho + 1, wo + 1)
            da = diff.cumsum(axis=1).cumsum(axis=2)[:, :ho, :wo]
            dz = (da * (1.0 - a * a)).reshape(ch, -1)
            w = self.params.arrays[f"conv_{s}_w"]
            grads[f"conv_{s}_w"] = (dz @ self.cols[s].T).reshape(w.shape)
            grads[f"conv_{s}_b"] = dz.sum(axis=1)
        return grads


# ---------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    path: Modality
    anchors: np.ndarray  # N x 4
    template: np.ndarray  # anchor template index per anchor
    rects: np.ndarray
    latents: np.ndarray  # N x D
    ctx_rects: np.ndarray
    context: np.ndarray  # N x D ring around each anchor
    logits: np.ndarray
    offsets: np.ndarray  # N x 4
    width: int
    height: int

    @property
    def scores(self) -> np.ndarray:
        return sigmoid(self.logits)

    @property
    def boxes(self) -> np.ndarray:
        return clip_boxes(decode(self.anchors, self.offsets), self.width, self.height)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def softplus(z):
    return np.logaddexp(0.0, z)


def decode(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2], anchors[:, 3]
    acx, acy = anchors[:, 0] + aw / 2, anchors[:, 1] + ah / 2
    cx = acx + offsets[:, 0] * aw
    cy = acy + offsets[:, 1] * ah
    w = aw * np.exp(np.clip(offsets[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    h = ah * np.exp(np.clip(offsets[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2], anchors[:, 3]
    acx, acy = anchors[:, 0] + aw / 2, anchors[:, 1] + ah / 2
    gcx, gcy = boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah,
                     np.log(boxes[:, 2] / aw), np.log(boxes[:, 3] / ah)], axis=1)


def clip_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    x1 = np.clip(boxes[:, 0], 0, width)
    y1 = np.clip(boxes[:, 1], 0, height)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, height)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def template_index(n_anchors: int, n_templates: int) -> np.ndarray:
    return np.arange(n_anchors) % n_templates


def heads(params: DetectorParams, path, latents: np.ndarray, context: np.ndarray,
          template: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    k = Modality(path).value
    a = params.arrays
    x = np.concatenate([latents, context], axis=1)
    logits = np.einsum("nd,nd->n", x, a[f"head_{k}_score_w"][template]) + a[f"head_{k}_score_b"][template]
    offsets = np.einsum("nd,nkd->nk", x, a[f"head_{k}_box_w"][template]) + a[f"head_{k}_box_b"][template]
    return logits, offsets


@lru_cache(maxsize=16)
def _anchor_layout(grid: AnchorGrid, width: int, height: int):
    """Anchors, template ids, box rects and context rects; read-only, shared across calls."""
    anchors = grid.anchors(width, height)
    out = (anchors, template_index(len(anchors), len(grid.sizes)),
           window_rects(anchors, width, height), window_rects(context_boxes(anchors), width, height))
    for arr in out:
        arr.flags.writeable = False
    return out


def forward(params: DetectorParams, pair: ImagePair, path, grid: AnchorGrid = AnchorGrid(),
            features: Optional[ImageFeatures] = None) -> ForwardOutput:
    path = Modality(path)
    if features is None:
        features = ImageFeatures(params, pair, PATH_STREAMS[path])
    if len(grid.sizes) != params.n_templates:
        raise ValueError(f"grid has {len(grid.sizes)} templates, heads have {params.n_templates}")
    anchors, template, rects, ctx_rects = _anchor_layout(grid, pair.width, pair.height)
    latents = features.pool(path, rects)
    context = features.pool_ring(path, rects, ctx_rects, latents)
    logits, offsets = heads(params, path, latents, context, template)
    return ForwardOutput(path, anchors, template, rects, latents, ctx_rects, context, logits, offsets,
                         pair.width, pair.height)


# ---------------------------------------------------------------- loss


@dataclass
class Assignment:
    positives: np.ndarray  # anchor indices
    matched: np.ndarray  # target index per positive
    negatives: np.ndarray  # candidate negative anchor indices (before mining)


def assign_anchors(anchors: np.ndarray, targets: np.ndarray,
                   ignore: Optional[np.ndarray] = None) -> Assignment:
    n = len(anchors)
    if len(targets) == 0:
        neg = np.arange(n)
        pos = np.zeros(0, dtype=int)
        matched = np.zeros(0, dtype=int)
    else:
        ious = iou_matrix(anchors, targets)
        best_t = ious.argmax(axis=1)
        best = ious[np.arange(n), best_t]
        is_pos = best >= POS_IOU
        match = best_t.copy()
        # every target keeps at least its best-overlapping anchor
        best_a = ious.argmax(axis=0)
        for t, a in enumerate(best_a):
            if ious[a, t] > 0:
                is_pos[a] = True
                match[a] = t
        is_neg = (best < NEG_IOU) & ~is_pos
        pos = np.flatnonzero(is_pos)
        matched = match[pos]
        neg = np.flatnonzero(is_neg)
    if ignore is not None and len(ignore) and len(neg):
        near = iou_matrix(anchors[neg], ignore).max(axis=1) >= NEG_IOU
        neg = neg[~near]
    return Assignment(pos, matched, neg)


@dataclass
class DetLoss:
    cls: float
    loc: float
    grad_logits: np.ndarray
    grad_offsets: np.ndarray
    mined: np.ndarray
    n_pos: int

    @property
    def total(self) -> float:
        return self.cls + self.loc


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


def detection_loss(out: ForwardOutput, targets: Sequence[Annotation] | np.ndarray,
                   ignore: Optional[np.ndarray] = None, assignment: Optional[Assignment] = None,
                   mined: Optional[np.ndarray] = None) -> DetLoss:
    """SSD-style classification + localization loss on one path's outputs.

    ``mined`` freezes the hard-negative selection (finite-difference checks
    need the piecewise-constant mining held fixed).
    """
    tboxes = targets if isinstance(targets, np.ndarray) else boxes_to_array([t.bbox for t in targets])
    if assignment is None:
        assignment = assign_anchors(out.anchors, tboxes, ignore)
    pos, neg = assignment.positives, assignment.negatives
    z = out.logits
    n_pos = len(pos)
    if mined is None:
        k = min(NEG_RATIO * max(n_pos, 1), len(neg))
        # hardest negatives = highest logits; stable sort keeps lower anchor index on ties
        order = np.argsort(-z[neg], kind="stable")
        mined = neg[order[:k]]
    n_cls = n_pos + len(mined)
    g_logit = np.zeros_like(z)
    cls = 0.0
    if n_cls:
        cls = (softplus(-z[pos]).sum() + softplus(z[mined]).sum()) / n_cls
        g_logit[pos] = -sigmoid(-z[pos]) / n_cls
        g_logit[mined] += sigmoid(z[mined]) / n_cls
    g_off = np.zeros_like(out.offsets)
    loc = 0.0
    if n_pos:
        t = encode(out.anchors[pos], tboxes[assignment.matched])
        d = out.offsets[pos] - t
        loc = smooth_l1(d).sum() / n_pos
        g_off[pos] = smooth_l1_grad(d) / n_pos
    return DetLoss(float(cls), float(loc), g_logit, g_off, mined, n_pos)


def head_backward(params: DetectorParams, out: ForwardOutput, g_logit: np.ndarray,
                  g_off: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Head parameter gradients, pooling rects, and dL/d(window means) for those rects."""
    k = out.path.value
    a = params.arrays
    x = np.concatenate([out.latents, out.context], axis=1)
    sw, bw = a[f"head_{k}_score_w"], a[f"head_{k}_box_w"]
    g_sw, g_sb = np.zeros_like(sw), np.zeros(sw.shape[0])
    g_bw, g_bb = np.zeros_like(bw), np.zeros((sw.shape[0], 4))
    for t in range(sw.shape[0]):
        sel = out.template == t
        g_sw[t] = x[sel].T @ g_logit[sel]
        g_sb[t] = g_logit[sel].sum()
        g_bw[t] = g_off[sel].T @ x[sel]
        g_bb[t] = g_off[sel].sum(axis=0)
    grads = {f"head_{k}_score_w": g_sw, f"head_{k}_score_b": g_sb,
             f"head_{k}_box_w": g_bw, f"head_{k}_box_b": g_bb}
    g_x = g_logit[:, None] * sw[out.template] + np.einsum("nk,nkd->nd", g_off, bw[out.template])
    d = out.latents.shape[1]
    g_lat, g_ctx = g_x[:, :d], g_x[:, d:]
    # ring mean = (S_outer - S_inner) / (n_outer - n_inner), rewritten on window means
    ci, co = rect_counts(out.rects), rect_counts(out.ctx_rects)
    den = co - ci
    scale = np.where(den > 0, 1.0 / np.maximum(den, 1.0), 0.0)[:, None]
    rects = np.concatenate([out.rects, out.ctx_rects])
    g_means = np.concatenate([g_lat - g_ctx * scale * ci[:, None], g_ctx * scale * co[:, None]])
    return grads, rects, g_means


def detection_loss_and_grads(params: DetectorParams, pair: ImagePair, path,
                             annotations: Sequence[Annotation], grid: AnchorGrid = AnchorGrid(),
                             mined: Optional[np.ndarray] = None):
    """(DetLoss, gradient dict) of one path's cls + loc loss on one image."""
    path = Modality(path)
    feats = ImageFeatures(params, pair, PATH_STREAMS[path])
    out = forward(params, pair, path, grid, feats)
    loss = detection_loss(out, annotations, mined=mined)
    grads, rects, g_means = head_backward(params, out, loss.grad_logits, loss.grad_offsets)
    grads.update(feats.backward(path, rects, g_means))
    return loss, grads


# ---------------------------------------------------------------- inference


def detect(params: DetectorParams, pair: ImagePair, grid: AnchorGrid = AnchorGrid(), path=Modality.F,
           score_thresh: float = 0.05, iou_thresh: float = 0.5, pre_nms: int = 300,
           max_dets: int = 50, features: Optional[ImageFeatures] = None) -> List[Tuple[BBox, float]]:
    """Post-processed detections of one path, sorted by descending score."""
    out = forward(params, pair, path, grid, features)
    boxes, scores = out.boxes, out.scores
    keep = np.flatnonzero((scores >= score_thresh) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0))
    keep = keep[np.argsort(-scores[keep], kind="stable")[:pre_nms]]
    sel = nms_indices(boxes[keep], scores[keep], iou_thresh, ids=keep)
    result = []
    for i in sel[:max_dets]:
        j = keep[i]
        result.append((BBox(*map(float, boxes[j])), float(scores[j])))
    return result


# ---------------------------------------------------------------- teacher/student


@dataclass
class TeacherStudent:
    teacher: DetectorParams
    student: DetectorParams
    ema_momentum: float = 0.99

    @classmethod
    def init(cls, seed: int, channels: int = 8, ema_momentum: float = 0.99,
             n_templates: int = 3) -> "TeacherStudent":
        student = DetectorParams.init(seed, channels, n_templates=n_templates)
        return cls(student.copy(), student, ema_momentum)


def ema_update(ts: TeacherStudent) -> TeacherStudent:
    mu = ts.ema_momentum
    if not 0.0 <= mu <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    teacher = {k: mu * v + (1.0 - mu) * ts.student.arrays[k] for k, v in ts.teacher.arrays.items()}
    return TeacherStudent(DetectorParams(teacher), ts.student, mu)


@dataclass
class PseudoLabel:
    bbox: BBox
    score: float
    latents: Dict[Modality, np.ndarray] = field(default_factory=dict)
    quality: str = "unclassified"


def teacher_candidates(teacher: DetectorParams, pair: ImagePair, gt_boxes: np.ndarray,
                       grid: AnchorGrid, score_thresh: float, nms_iou: float = 0.5,
                       features: Optional[ImageFeatures] = None,
                       gt_iou: float = 0.5) -> List[Tuple[BBox, float]]:
    """Teacher fusion-path detections whose IoU with every ground-truth box is below ``gt_iou``."""
    out = forward(teacher, pair, Modality.F, grid, features)
    boxes, scores = out.boxes, out.scores
    keep = np.flatnonzero((scores >= score_thresh) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0))
    if len(keep) == 0:
        return []
    sel = keep[nms_indices(boxes[keep], scores[keep], nms_iou, ids=keep)]
    if len(gt_boxes):
        sel = sel[iou_matrix(boxes[sel], gt_boxes).max(axis=1) < gt_iou]
    return [(BBox(*map(float, boxes[j])), float(scores[j])) for j in sel]


def generate_pseudo_labels(ts: TeacherStudent, pair: ImagePair, gt: Sequence[Annotation],
                           score_thresh: float = 0.5, grid: AnchorGrid = AnchorGrid(),
                           student_features: Optional[ImageFeatures] = None,
                           gt_iou: float = 0.5) -> List[PseudoLabel]:
    gt_boxes = boxes_to_array([a.bbox for a in gt])
    cands = teacher_candidates(ts.teacher, pair, gt_boxes, grid, score_thresh, gt_iou=gt_iou)
    if not cands:
        return []
    if student_features is None:
        student_features = ImageFeatures(ts.student, pair)
    rects = window_rects(boxes_to_array([b for b, _ in cands]), pair.width, pair.height)
    lat = {k: student_features.pool(k, rects) for k in MODALITIES}
    return [PseudoLabel(b, s, {k: lat[k][i] for k in MODALITIES}) for i, (b, s) in enumerate(cands)]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, ts: TeacherStudent, meta: Optional[dict] = None) -> None:
    from .storage import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(ts, meta))


def checkpoint_bytes(ts: TeacherStudent, meta: Optional[dict] = None) -> bytes:
    names = ts.student.names()
    header = {
        "version": 1,
        "ema_momentum": repr(float(ts.ema_momentum)),
        "arrays": [[n, list(ts.student.arrays[n].shape)] for n in names],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + b"\n")
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    for role in (ts.teacher, ts.student):
        for n in names:
            buf.write(np.ascontiguousarray(role.arrays[n], dtype="<f8").tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Tuple[TeacherStudent, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> Tuple[TeacherStudent, dict]:
    if not data.startswith(CKPT_MAGIC + b"\n"):
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC) + 1
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    roles = []
    for _ in range(2):
        arrays = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        roles.append(DetectorParams(arrays))
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    ts = TeacherStudent(roles[0], roles[1], float(header["ema_momentum"]))
    return ts, header["meta"]
