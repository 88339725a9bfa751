"""Boxes, image pairs, feature maps and the small numeric primitives built on them."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

COSINE_EPS = 1e-12


class EmptyCrop(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class Source(str, enum.Enum):
    ORIGINAL = "original"
    REFINED = "refined"
    APRA_PATCH = "apra_patch"


class Modality(str, enum.Enum):
    V = "V"
    T = "T"
    F = "F"


MODALITIES = (Modality.V, Modality.T, Modality.F)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2) -> "BBox":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    def clipped(self, width: int, height: int) -> "BBox":
        x1 = min(max(self.x, 0.0), width)
        y1 = min(max(self.y, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return BBox.from_xyxy(x1, y1, x2, y2)


@dataclass(frozen=True)
class Annotation:
    bbox: BBox
    source: Source = Source.ORIGINAL
    id: int = 0


@dataclass
class ImagePair:
    """Pixel-aligned visible (H, W, 3) and thermal (H, W, 1) intensities in [0, 1]."""

    visible: np.ndarray
    thermal: np.ndarray
    daynight: str = "day"
    id: int = 0

    def __post_init__(self):
        if self.visible.ndim != 3 or self.visible.shape[2] != 3:
            raise ValueError("visible must be H x W x 3")
        if self.thermal.ndim == 2:
            self.thermal = self.thermal[:, :, None]
        if self.thermal.shape != self.visible.shape[:2] + (1,):
            raise ValueError("visible and thermal must share H and W")
        if self.daynight not in ("day", "night"):
            raise ValueError(f"bad daynight flag {self.daynight!r}")

    @property
    def height(self) -> int:
        return self.visible.shape[0]

    @property
    def width(self) -> int:
        return self.visible.shape[1]

    def copy(self) -> "ImagePair":
        return ImagePair(self.visible.copy(), self.thermal.copy(), self.daynight, self.id)


@dataclass
class FeatureMap:
    values: np.ndarray  # C x h x w

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("feature map must be C x h x w")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("non-finite feature values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.area + b.area - inter), 1.0)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) arrays of x, y, w, h boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(inter > 0, np.minimum(inter / np.maximum(union, 1e-300), 1.0), 0.0)


def nms(detections: Sequence[Tuple[BBox, float]], iou_thresh: float,
        ids: Sequence[int] | None = None) -> List[Tuple[BBox, float]]:
    """Greedy non-maximum suppression.

    Detections are visited by descending score; equal scores are broken by
    the lower id (the input position when ``ids`` is not given).
    """
    keep = nms_indices(boxes_to_array([d[0] for d in detections]),
                       np.array([d[1] for d in detections], dtype=np.float64),
                       iou_thresh, ids)
    return [detections[i] for i in keep]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
                ids: Sequence[int] | None = None) -> List[int]:
    n = len(scores)
    if n == 0:
        return []
    tie = np.arange(n) if ids is None else np.asarray(ids)
    order = np.lexsort((tie, -scores))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] >= iou_thresh
    return keep


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop_rect(bbox: BBox, width: int, height: int) -> Tuple[int, int, int, int]:
    """Integer pixel rectangle (x0, y0, x1, y1), end-exclusive, clipped to the image."""
    x0 = min(max(round_half_up(bbox.x), 0), width)
    y0 = min(max(round_half_up(bbox.y), 0), height)
    x1 = min(max(round_half_up(bbox.x2), 0), width)
    y1 = min(max(round_half_up(bbox.y2), 0), height)
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"{bbox} has no pixels inside a {width}x{height} image")
    return x0, y0, x1, y1


def crop(pair: ImagePair, bbox: BBox, modality: Modality | str) -> np.ndarray:
    x0, y0, x1, y1 = crop_rect(bbox, pair.width, pair.height)
    src = pair.visible if Modality(modality) is Modality.V else pair.thermal
    if Modality(modality) is Modality.F:
        raise ValueError("crop takes V or T; fusion is built from both crops")
    return src[y0:y1, x0:x1].copy()


def gap(fm: FeatureMap | np.ndarray) -> np.ndarray:
    values = fm.values if isinstance(fm, FeatureMap) else np.asarray(fm)
    if values.shape[1] * values.shape[2] < 1:
        raise ValueError("empty feature map")
    return values.mean(axis=(1, 2))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-normalize rows; rows with norm below the cosine floor become zero."""
    norms = np.linalg.norm(x, axis=1)
    safe = norms >= COSINE_EPS
    out = np.zeros_like(x, dtype=np.float64)
    out[safe] = x[safe] / norms[safe, None]
    return out, norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"latent dims {a.shape[1]} vs {b.shape[1]}")
    an, _ = normalize_rows(a)
    bn, _ = normalize_rows(b)
    return np.clip(an @ bn.T, -1.0, 1.0)

