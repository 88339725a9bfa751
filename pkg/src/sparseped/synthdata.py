"""Seeded paired visible/thermal street scenes with pedestrian boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .core import Annotation, BBox, ImagePair, Source

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> Tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seeds(seed: int, n: int) -> List[int]:
    state = seed & MASK64
    out = []
    for _ in range(n):
        state, z = splitmix64(state)
        out.append(z)
    return out


@dataclass(frozen=True)
class SceneParams:
    width: int = 160
    height: int = 120
    n_pedestrians: Tuple[int, int] = (1, 6)
    min_h: float = 12.0
    max_h: float = 48.0
    aspect: float = 0.42
    day_probability: float = 0.5
    noise_sigma: float = 0.02
    occlusion_probability: float = 0.15
    n_distractors: Tuple[int, int] = (0, 3)
    horizon: float = 0.3

    def __post_init__(self):
        lo, hi = self.n_pedestrians
        if self.min_h < 6 or self.max_h < self.min_h:
            raise ValueError("pedestrian heights need 6 <= min_h <= max_h")
        if self.max_h > self.height:
            raise ValueError("max_h exceeds image height")
        if lo < 0 or hi < lo:
            raise ValueError("bad n_pedestrians range")
        for p in (self.day_probability, self.occlusion_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass
class Dataset:
    pairs: List[ImagePair]
    annotations: Dict[int, List[Annotation]]
    split: str = "train"
    params: SceneParams = field(default_factory=SceneParams)

    def __post_init__(self):
        ids = {p.id for p in self.pairs}
        for k in self.annotations:
            if k not in ids:
                raise ValueError(f"annotations reference unknown image {k}")

    def pair(self, image_id: int) -> ImagePair:
        for p in self.pairs:
            if p.id == image_id:
                return p
        raise KeyError(image_id)

    @property
    def image_ids(self) -> List[int]:
        return [p.id for p in self.pairs]

    def total_annotations(self) -> int:
        return sum(len(v) for v in self.annotations.values())


def ellipse_alpha(width: int, height: int, box: BBox) -> np.ndarray:
    """Anti-aliased coverage of the ellipse inscribed in ``box`` at pixel centres."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    cx, cy = box.center
    rx, ry = box.w / 2.0, box.h / 2.0
    dx = (xs[None, :] - cx) / rx
    dy = (ys[:, None] - cy) / ry
    r = np.sqrt(dx * dx + dy * dy)
    # signed distance to the boundary in pixels, approximated along the smaller axis
    return np.clip((1.0 - r) * min(rx, ry) + 0.5, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _sample_box(rng, params: SceneParams, placed: List[BBox]) -> BBox:
    H, W = params.height, params.width
    log_lo, log_hi = math.log(params.min_h), math.log(params.max_h)
    h = math.exp(rng.uniform(log_lo, log_hi))
    w = max(h * params.aspect * rng.uniform(0.9, 1.1), 2.0)
    box = None
    for _ in range(50):
        x = rng.uniform(0.0, W - w)
        foot = params.horizon * H + h * rng.uniform(0.7, 1.5)
        foot = min(max(foot, h), float(H))
        box = BBox(x, foot - h, w, h)
        if all(_disjoint(box, p) for p in placed):
            return box
    return box


def _disjoint(a: BBox, b: BBox) -> bool:
    return a.x2 <= b.x or b.x2 <= a.x or a.y2 <= b.y or b.y2 <= a.y


def generate_scene(seed: int, params: SceneParams = SceneParams(), image_id: int = 0,
                   first_annotation_id: int = 0) -> Tuple[ImagePair, List[Annotation]]:
    rng = np.random.default_rng(seed)
    H, W = params.height, params.width
    day = bool(rng.random() < params.day_probability)
    yy = (np.arange(H) / max(H - 1, 1))[:, None] * np.ones((1, W))

    if day:
        base = rng.uniform(0.45, 0.65)
        vis_gray = base + 0.18 * (1.0 - yy)
    else:
        base = rng.uniform(0.05, 0.14)
        vis_gray = base + 0.06 * (1.0 - yy)
    tint = rng.uniform(-0.03, 0.03, size=3)
    visible = vis_gray[:, :, None] + tint[None, None, :]
    t_base = rng.uniform(0.22, 0.36)
    thermal = t_base + 0.08 * yy + (0.03 if day else 0.0)

    k_lo, k_hi = params.n_pedestrians
    n_ped = int(rng.integers(k_lo, k_hi + 1))
    n_dis = int(rng.integers(params.n_distractors[0], params.n_distractors[1] + 1))

    # distractors: warm wide blobs (vehicles) and cold thin poles
    for _ in range(n_dis):
        if rng.random() < 0.5:
            dw, dh = rng.uniform(0.11, 0.25) * W, rng.uniform(0.07, 0.13) * H
            dx, dy = rng.uniform(0, W - dw), rng.uniform(params.horizon * H, max(H - dh, params.horizon * H))
            a = ellipse_alpha(W, H, BBox(dx, dy, dw, dh))
            thermal = thermal * (1 - a) + a * rng.uniform(0.5, 0.7)
            col = rng.uniform(0.1, 0.9, size=3) if day else rng.uniform(0.05, 0.2, size=3)
            visible = visible * (1 - a[:, :, None]) + a[:, :, None] * col
        else:
            pw, ph = rng.uniform(2, min(4, W)), rng.uniform(0.4, 0.8) * H
            px = rng.uniform(0, W - pw)
            a = ellipse_alpha(W, H, BBox(px, H - ph, pw, ph))
            col = rng.uniform(0.2, 0.4) if day else rng.uniform(0.02, 0.08)
            visible = visible * (1 - a[:, :, None]) + a[:, :, None] * col

    placed: List[BBox] = []
    for _ in range(n_ped):
        placed.append(_sample_box(rng, params, placed))
    # farther (smaller) pedestrians are drawn first so nearer ones overlap them
    order = sorted(range(n_ped), key=lambda i: placed[i].y2)
    for i in order:
        box = placed[i]
        a = ellipse_alpha(W, H, box)
        occ = None
        if rng.random() < params.occlusion_probability:
            frac = rng.uniform(0.3, 0.6)
            ow = frac * box.w
            ox = box.x if rng.random() < 0.5 else box.x2 - ow
            occ = (ox, ow)
        heat = rng.uniform(0.68, 0.92)
        thermal = thermal * (1 - a) + a * heat
        contrast = rng.uniform(0.2, 0.35) if day else rng.uniform(0.02, 0.06)
        sign = rng.choice([-1.0, 1.0], size=3)
        ped_col = np.clip(vis_gray[:, :, None] + sign[None, None, :] * contrast, 0, 1)
        visible = visible * (1 - a[:, :, None]) + a[:, :, None] * ped_col
        if occ is not None:
            ox, ow = occ
            oa = np.zeros((H, W))
            x0, x1 = int(max(math.floor(ox), 0)), int(min(math.ceil(ox + ow), W))
            y0, y1 = int(max(math.floor(box.y), 0)), int(min(math.ceil(box.y2), H))
            oa[y0:y1, x0:x1] = 1.0
            oa *= (a > 0)
            oc = rng.uniform(0.2, 0.6) if day else rng.uniform(0.03, 0.1)
            visible = visible * (1 - oa[:, :, None]) + oa[:, :, None] * oc
            thermal = thermal * (1 - oa) + oa * (t_base + 0.02)

    visible = visible + rng.normal(0.0, params.noise_sigma, size=visible.shape)
    thermal = thermal + rng.normal(0.0, params.noise_sigma, size=thermal.shape)
    pair = ImagePair(quantize(visible), quantize(thermal)[:, :, None],
                     "day" if day else "night", image_id)
    anns = [Annotation(b, Source.ORIGINAL, first_annotation_id + j) for j, b in enumerate(placed)]
    return pair, anns


def generate_dataset(seed: int, n_images: int, params: SceneParams = SceneParams(),
                     split: str = "train") -> Dataset:
    if n_images < 0:
        raise ValueError("n_images must be >= 0")
    pairs, annotations = [], {}
    next_ann = 0
    for image_id, s in enumerate(derive_seeds(seed, n_images)):
        pair, anns = generate_scene(s, params, image_id=image_id, first_annotation_id=next_ann)
        next_ann += len(anns)
        pairs.append(pair)
        annotations[image_id] = anns
    return Dataset(pairs, annotations, split, params)
