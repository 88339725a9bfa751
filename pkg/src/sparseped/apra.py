"""Retrieval augmentation: paste brightness-matched pedestrian exemplars into
low-saliency spots of the plausible pedestrian band, and promote confident
pseudo-labels to persistent ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Annotation, BBox, ImagePair, Modality, Source, boxes_to_array, crop_rect, iou_matrix

log = logging.getLogger(__name__)

Z90 = 1.645
SALIENCY_SIGMAS = (1.0, 8.0)


class NoValidSite(RuntimeError):
    pass


class EmptyStore(RuntimeError):
    pass


@dataclass
class ExemplarPatch:
    pixels_v: np.ndarray  # h x w x 3
    pixels_t: np.ndarray  # h x w x 1
    source_brightness: float
    origin: str = "initial_gt"
    id: int = 0

    def __post_init__(self):
        if self.pixels_v.shape[:2] != self.pixels_t.shape[:2]:
            raise ValueError("modality patches must share dimensions")
        if not 0.0 <= self.source_brightness <= 1.0:
            raise ValueError("brightness must lie in [0, 1]")

    @property
    def native_size(self) -> Tuple[int, int]:
        return self.pixels_v.shape[1], self.pixels_v.shape[0]


@dataclass
class ExemplarStore:
    patches: List[ExemplarPatch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)

    def next_id(self) -> int:
        return self.patches[-1].id + 1 if self.patches else 0

    def add(self, pixels_v, pixels_t, brightness: float, origin: str) -> ExemplarPatch:
        p = ExemplarPatch(pixels_v, pixels_t, float(brightness), origin, self.next_id())
        self.patches.append(p)
        return p

    def add_crop(self, pair: ImagePair, bbox: BBox, origin: str, brightness: Optional[float] = None) -> ExemplarPatch:
        x0, y0, x1, y1 = crop_rect(bbox, pair.width, pair.height)
        b = image_brightness(pair) if brightness is None else brightness
        return self.add(pair.visible[y0:y1, x0:x1].copy(), pair.thermal[y0:y1, x0:x1].copy(), b, origin)

    @classmethod
    def from_ground_truth(cls, pairs: Sequence[ImagePair], annotations) -> "ExemplarStore":
        store = cls()
        for pair in sorted(pairs, key=lambda p: p.id):
            b = image_brightness(pair)
            for ann in annotations.get(pair.id, []):
                store.add_crop(pair, ann.bbox, "initial_gt", b)
        return store


def image_brightness(pair: ImagePair) -> float:
    return float(pair.visible.mean())


def retrieve_patches(store: ExemplarStore, target_brightness: float, m: int = 1) -> List[ExemplarPatch]:
    if len(store) == 0:
        raise EmptyStore("exemplar store is empty")
    if m < 1:
        raise ValueError("m must be positive")
    ranked = sorted(store.patches, key=lambda p: (abs(p.source_brightness - target_brightness), p.id))
    return ranked[:m]


def fused_luminance(pair: ImagePair) -> np.ndarray:
    gray = pair.visible @ np.array([0.299, 0.587, 0.114])
    return 0.5 * gray + 0.5 * pair.thermal[:, :, 0]


def saliency_map(pair: ImagePair) -> np.ndarray:
    """Max-normalized |G_1 - G_8| centre-surround contrast of the fused luminance."""
    lum = fused_luminance(pair)
    s1, s2 = SALIENCY_SIGMAS
    dog = np.abs(gaussian_filter(lum, s1, mode="reflect") - gaussian_filter(lum, s2, mode="reflect"))
    peak = dog.max()
    if peak < 1e-9:
        return np.zeros_like(dog)
    return dog / peak


@dataclass(frozen=True)
class YBand:
    y_lo: float
    y_hi: float
    degenerate: bool = False

    def contains(self, y: float) -> bool:
        return self.y_lo <= y <= self.y_hi


def valid_y_band(annotations: Sequence[Annotation], image_h: float) -> YBand:
    if len(annotations) < 2:
        return YBand(0.0, float(image_h), True)
    ys = np.array([a.bbox.y + a.bbox.h / 2.0 for a in annotations])
    mu, sd = ys.mean(), ys.std()
    lo = min(max(mu - Z90 * sd, 0.0), image_h)
    hi = min(max(mu + Z90 * sd, 0.0), image_h)
    return YBand(float(lo), float(hi), False)


def global_mean_size(annotations) -> Tuple[float, float]:
    boxes = [a.bbox for anns in annotations.values() for a in anns]
    if not boxes:
        raise ValueError("no annotations to average")
    return float(np.mean([b.w for b in boxes])), float(np.mean([b.h for b in boxes]))


def target_patch_size(annotations: Sequence[Annotation], global_mean: Tuple[float, float]) -> Tuple[int, int]:
    if annotations:
        w = float(np.mean([a.bbox.w for a in annotations]))
        h = float(np.mean([a.bbox.h for a in annotations]))
    else:
        w, h = global_mean
    return max(int(round(w)), 1), max(int(round(h)), 1)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Pixel-centre aligned bilinear resize of an (h, w, C) array."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def candidate_sites(saliency: np.ndarray, band: YBand, existing: Sequence[Annotation],
                    size: Tuple[int, int], stride: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Valid top-left corners (K, 2) as (x, y) and their footprint saliency sums."""
    H, W = saliency.shape
    w, h = size
    if w > W or h > H:
        return np.zeros((0, 2), dtype=int), np.zeros(0)
    xs = np.arange(0, W - w + 1, stride)
    ys = np.arange(0, H - h + 1, stride)
    cy = ys + h / 2.0
    ys = ys[(cy >= band.y_lo) & (cy <= band.y_hi)]
    if len(xs) == 0 or len(ys) == 0:
        return np.zeros((0, 2), dtype=int), np.zeros(0)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    sites = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if existing:
        cand = np.concatenate([sites.astype(np.float64), np.tile([w, h], (len(sites), 1))], axis=1)
        free = iou_matrix(cand, boxes_to_array([a.bbox for a in existing])).max(axis=1) == 0
        sites = sites[free]
    ii = np.zeros((H + 1, W + 1))
    ii[1:, 1:] = saliency.cumsum(0).cumsum(1)
    x, y = sites[:, 0], sites[:, 1]
    sums = ii[y + h, x + w] - ii[y, x + w] - ii[y + h, x] + ii[y, x]
    return sites, sums


def choose_site(sites: np.ndarray, sums: np.ndarray) -> Tuple[int, int]:
    if len(sites) == 0:
        raise NoValidSite("no candidate position satisfies the band and overlap constraints")
    # minimum footprint saliency; ties -> topmost, then leftmost
    order = np.lexsort((sites[:, 0], sites[:, 1], sums))
    x, y = sites[order[0]]
    return int(x), int(y)


def place_patch(pair: ImagePair, patch: ExemplarPatch, saliency: np.ndarray, band: YBand,
                existing: Sequence[Annotation], size: Tuple[int, int], stride: int = 4,
                annotation_id: int = 0) -> Tuple[ImagePair, Annotation]:
    w, h = size
    x, y = choose_site(*candidate_sites(saliency, band, existing, size, stride))
    out = pair.copy()
    out.visible[y:y + h, x:x + w] = resize_bilinear(patch.pixels_v, w, h)
    out.thermal[y:y + h, x:x + w] = resize_bilinear(patch.pixels_t, w, h)
    return out, Annotation(BBox(float(x), float(y), float(w), float(h)), Source.APRA_PATCH, annotation_id)


@dataclass
class AugmentResult:
    pair: ImagePair
    annotations: List[Annotation]
    placed: List[Annotation]
    band: Optional[YBand] = None
    saliency: Optional[np.ndarray] = None
    skipped: int = 0


def augment(pair: ImagePair, annotations: Sequence[Annotation], store: ExemplarStore,
            global_mean: Tuple[float, float], m: int = 1, stride: int = 4,
            first_id: int = -1) -> AugmentResult:
    """Paste up to ``m`` retrieved exemplars; band and size come from pre-placement boxes."""
    anns = list(annotations)
    if len(store) == 0:
        log.info("image %d: exemplar store empty, no augmentation", pair.id)
        return AugmentResult(pair, anns, [])
    patches = retrieve_patches(store, image_brightness(pair), m)
    band = valid_y_band(annotations, pair.height)
    size = target_patch_size(annotations, global_mean)
    sal = saliency_map(pair)
    out, placed, skipped = pair, [], 0
    for i, patch in enumerate(patches):
        try:
            out, ann = place_patch(out, patch, sal, band, anns, size, stride, first_id - i)
        except NoValidSite:
            log.info("image %d: no valid site for exemplar %d", pair.id, patch.id)
            skipped += 1
            continue
        anns.append(ann)
        placed.append(ann)
    return AugmentResult(out, anns, placed, band, sal, skipped)


@dataclass
class RefineEvent:
    image_id: int
    annotation: Annotation
    score: float
    weight_f: float
    exemplar_id: int


def dynamic_refine(pseudo_labels, weights, tau1: float, pair: ImagePair, gt: List[Annotation],
                   store: ExemplarStore, next_annotation_id: int, strict_all: bool = False,
                   exclude: Sequence[Annotation] = ()) -> List[RefineEvent]:
    """Promote pseudo-labels whose fusion weight and score both exceed ``tau1``.

    ``gt`` and ``store`` are extended in place. Candidates overlapping a pasted
    exemplar (``exclude``) are skipped because their pixels are synthetic.
    """
    events: List[RefineEvent] = []
    if not weights.defined:
        return events
    keys = (Modality.V, Modality.T, Modality.F) if strict_all else (Modality.F,)
    if not all(weights.raw[k] > tau1 for k in keys):
        return events
    wf = float(weights.raw[Modality.F])
    brightness = image_brightness(pair)
    ex_boxes = boxes_to_array([a.bbox for a in exclude])
    for pl in pseudo_labels:
        if not pl.score > tau1:
            continue
        cand = boxes_to_array([pl.bbox])
        if gt and iou_matrix(cand, boxes_to_array([a.bbox for a in gt])).max() >= 0.5:
            continue
        if len(ex_boxes) and iou_matrix(cand, ex_boxes).max() > 0:
            continue
        ann = Annotation(pl.bbox, Source.REFINED, next_annotation_id + len(events))
        gt.append(ann)
        patch = store.add_crop(pair, pl.bbox, "dynamic_refined", brightness)
        events.append(RefineEvent(pair.id, ann, float(pl.score), wf, patch.id))
    return events
