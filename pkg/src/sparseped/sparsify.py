"""Turn a fully annotated dataset into a sparsely annotated one.

Each pass visits images in ascending id order and deletes the annotation
with the highest removal probability (the smallest box) from every image
that still has more than one annotation, until the requested number of
deletions is reached or no image has a spare annotation left.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import Annotation
from .synthdata import Dataset


class TargetUnreachable(UserWarning):
    pass


@dataclass
class RemovalLog:
    removed: List[Tuple[int, int, float]] = field(default_factory=list)
    requested_fraction: float = 0.0
    target_count: int = 0

    @property
    def achieved_count(self) -> int:
        return len(self.removed)

    @property
    def reached(self) -> bool:
        return self.achieved_count == self.target_count

    def report(self) -> str:
        lines = [
            f"requested_fraction={self.requested_fraction}",
            f"target_count={self.target_count}",
            f"achieved_count={self.achieved_count}",
        ]
        if not self.reached:
            lines.append("warning=TargetUnreachable")
        lines += [f"removed image={i} annotation={a} area={area!r}" for i, a, area in self.removed]
        return "\n".join(lines) + "\n"


def calc_removal_probs(areas: Sequence[float]) -> np.ndarray:
    areas = np.asarray(areas, dtype=np.float64)
    if areas.size == 0 or np.any(areas <= 0):
        raise ValueError("areas must be a non-empty list of positive values")
    inv = 1.0 / areas
    return inv / inv.sum()


def _pick(anns: List[Annotation], mode: str, rng: np.random.Generator) -> int:
    if mode == "random":
        return int(rng.integers(len(anns)))
    probs = calc_removal_probs([a.bbox.area for a in anns])
    best = probs.max()
    # argmax with ties resolved toward the lower annotation id
    cands = [i for i, p in enumerate(probs) if p == best]
    return min(cands, key=lambda i: anns[i].id)


def sparsify_dataset(dataset: Dataset, removal_fraction: float, seed: int = 0,
                     mode: str = "area") -> Tuple[Dataset, RemovalLog]:
    """Pure transform; ``mode="random"`` is the area-independent comparison variant."""
    if not (removal_fraction == 0 or 0 < removal_fraction < 1):
        raise ValueError("removal_fraction must be 0 or in (0, 1)")
    if mode not in ("area", "random"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    anns: Dict[int, List[Annotation]] = {k: list(v) for k, v in dataset.annotations.items()}
    total = sum(len(v) for v in anns.values())
    target = math.floor(removal_fraction * total)
    log = RemovalLog(requested_fraction=removal_fraction, target_count=target)
    order = sorted(anns)
    n = 0
    while n < target:
        progressed = False
        for image_id in order:
            if n >= target:
                break
            cur = anns[image_id]
            if len(cur) > 1:
                i = _pick(cur, mode, rng)
                gone = cur.pop(i)
                log.removed.append((image_id, gone.id, gone.bbox.area))
                n += 1
                progressed = True
        if not progressed:
            break
    if not log.reached:
        warnings.warn(f"removed {log.achieved_count} of {target} requested annotations",
                      TargetUnreachable)
    out = Dataset(list(dataset.pairs), anns, dataset.split, dataset.params)
    return out, log
