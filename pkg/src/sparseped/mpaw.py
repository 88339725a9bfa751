"""Modality-adaptive loss weights from pseudo-label / ground-truth latent similarity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .core import MODALITIES, Modality, cosine_matrix


class EmptyInput(ValueError):
    pass


def best_match_similarity(pl_latents, gt_latents) -> np.ndarray:
    """Per pseudo-label, the highest cosine similarity to any ground-truth latent."""
    pl = np.atleast_2d(np.asarray(pl_latents, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt_latents, dtype=np.float64))
    if len(pl_latents) == 0 or len(gt_latents) == 0:
        raise EmptyInput("need at least one pseudo-label and one ground-truth latent")
    return cosine_matrix(pl, gt).max(axis=1)


def modality_weight(pl_latents, gt_latents) -> float:
    return float(best_match_similarity(pl_latents, gt_latents).mean())


@dataclass
class ModalityWeights:
    """Raw weights in [-1, 1]; ``None`` everywhere when no pseudo-label or no GT exists."""

    raw: Dict[Modality, Optional[float]] = field(default_factory=dict)
    n_pseudo: int = 0
    n_gt: int = 0

    @property
    def defined(self) -> bool:
        return self.n_pseudo >= 1 and self.n_gt >= 1

    def clamped(self, k) -> float:
        """Weight used for the loss: clamped to [0, 1]; 1 when undefined (supervised fallback)."""
        if not self.defined:
            return 1.0
        return float(np.clip(self.raw[Modality(k)], 0.0, 1.0))

    def as_dict(self) -> Dict[Modality, float]:
        return {k: self.clamped(k) for k in MODALITIES}

    @classmethod
    def unit(cls) -> "ModalityWeights":
        return cls({k: None for k in MODALITIES})


def compute_weights(pl_latents: Mapping[Modality, Sequence], gt_latents: Mapping[Modality, Sequence]) -> ModalityWeights:
    n = len(pl_latents[Modality.V]) if Modality.V in pl_latents else 0
    m = len(gt_latents[Modality.V]) if Modality.V in gt_latents else 0
    if n == 0 or m == 0:
        return ModalityWeights({k: None for k in MODALITIES}, n, m)
    raw = {k: modality_weight(pl_latents[k], gt_latents[k]) for k in MODALITIES}
    return ModalityWeights(raw, n, m)


def batch_mean_weights(weights: Sequence[ModalityWeights]) -> Dict[Modality, float]:
    """Per-modality mean of the clamped per-image weights across a mini-batch."""
    if not weights:
        return {k: 1.0 for k in MODALITIES}
    return {k: float(np.mean([w.clamped(k) for w in weights])) for k in MODALITIES}


def weighted_detection_loss(weights: Mapping, losses: Mapping) -> float:
    """Sum over modalities of weight * loss; weights are constants for the gradient."""
    if isinstance(weights, ModalityWeights):
        weights = weights.as_dict()
    return float(sum(float(weights[Modality(k)]) * float(losses[Modality(k)]) for k in MODALITIES))
