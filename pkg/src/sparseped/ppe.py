"""Pseudo-label quality partition and the positive-guiding contrastive loss.

For positives p_i and negatives n_j (pooled latents of one modality)::

    P_i = sum_j exp(cos(p_i, p_j) / tau)      (j over all positives, self included)
    N_i = sum_j exp(cos(p_i, n_j) / tau)
    L   = -(1 / N_p) sum_i log(P_i / (P_i + N_i))

The loss is zero when either set is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .core import COSINE_EPS, MODALITIES, Modality
from .mpaw import best_match_similarity

POSITIVE, NEGATIVE, UNCERTAIN = "positive", "negative", "uncertain"


@dataclass
class QualityPartition:
    positives: List[int] = field(default_factory=list)
    negatives: List[int] = field(default_factory=list)
    uncertain: List[int] = field(default_factory=list)
    tau1: float = 0.9
    tau2: float = 0.7
    similarities: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def label(self, i: int) -> str:
        if i in self.positives:
            return POSITIVE
        if i in self.negatives:
            return NEGATIVE
        return UNCERTAIN

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.positives), len(self.negatives), len(self.uncertain)


def partition_from_similarity(sims: Sequence[float], tau1: float = 0.9, tau2: float = 0.7) -> QualityPartition:
    """Strict thresholds: s > tau1 positive, s < tau2 negative, otherwise uncertain."""
    if not tau1 > tau2:
        raise ValueError("tau1 must exceed tau2")
    sims = np.asarray(sims, dtype=np.float64)
    part = QualityPartition(tau1=tau1, tau2=tau2, similarities=sims)
    for i, s in enumerate(sims):
        if s > tau1:
            part.positives.append(i)
        elif s < tau2:
            part.negatives.append(i)
        else:
            part.uncertain.append(i)
    return part


def classify(pl_latents, gt_latents, tau1: float = 0.9, tau2: float = 0.7) -> QualityPartition:
    n = len(pl_latents)
    if len(gt_latents) == 0:
        # no ground truth to compare against: nothing can be trusted either way
        if not tau1 > tau2:
            raise ValueError("tau1 must exceed tau2")
        return QualityPartition([], [], list(range(n)), tau1, tau2, np.full(n, np.nan))
    if n == 0:
        return partition_from_similarity([], tau1, tau2)
    return partition_from_similarity(best_match_similarity(pl_latents, gt_latents), tau1, tau2)


@dataclass
class PGLossResult:
    loss: float
    grad_positive: np.ndarray  # N_p x D
    grad_negative: np.ndarray  # N_n x D


def _unit(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    safe = norms >= COSINE_EPS
    u = np.zeros_like(x)
    u[safe] = x[safe] / norms[safe, None]
    return u, np.where(safe, norms, np.inf)


def _through_normalization(g_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|)^T g = (g - (g.u) u) / |x|; zero-norm rows have norms=inf -> 0
    return (g_unit - np.sum(g_unit * unit, axis=1, keepdims=True) * unit) / norms[:, None]


def pg_loss(positive_latents, negative_latents, tau: float = 0.1) -> PGLossResult:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    pos = np.atleast_2d(np.asarray(positive_latents, dtype=np.float64)) if len(positive_latents) else np.zeros((0, 0))
    neg = np.atleast_2d(np.asarray(negative_latents, dtype=np.float64)) if len(negative_latents) else np.zeros((0, 0))
    n_p, n_n = len(positive_latents), len(negative_latents)
    if n_p == 0 or n_n == 0:
        d = pos.shape[1] if n_p else (neg.shape[1] if n_n else 0)
        return PGLossResult(0.0, np.zeros((n_p, d)), np.zeros((n_n, d)))
    up, norm_p = _unit(pos)
    un, norm_n = _unit(neg)
    spp = up @ up.T / tau
    spn = up @ un.T / tau
    # zero-norm rows have cosine 0 with everything, including themselves
    log_p = logsumexp(spp, axis=1)
    log_n = logsumexp(spn, axis=1)
    # -log(P / (P + N)) = softplus(log N - log P), free of cancellation when N << P
    gap_pn = log_n - log_p
    loss = float(np.mean(np.logaddexp(0.0, gap_pn)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * gap_pn))
    soft_p = np.exp(spp - log_p[:, None])
    soft_n = np.exp(spn - log_n[:, None])
    g_spp = -(sig[:, None] * soft_p) / (n_p * tau)
    g_spn = (sig[:, None] * soft_n) / (n_p * tau)
    g_up = g_spp @ up + g_spp.T @ up + g_spn @ un
    g_un = g_spn.T @ up
    return PGLossResult(loss, _through_normalization(g_up, up, norm_p), _through_normalization(g_un, un, norm_n))


def pg_loss_all_modalities(partitions: Mapping[Modality, QualityPartition],
                           latents: Mapping[Modality, Sequence], tau: float = 0.1) -> Dict[Modality, PGLossResult]:
    """Independent PG loss per modality, each using that modality's own partition."""
    out = {}
    for k in MODALITIES:
        lat = np.asarray(latents[k], dtype=np.float64)
        part = partitions[k]
        out[k] = pg_loss(lat[part.positives] if part.positives else [],
                         lat[part.negatives] if part.negatives else [], tau)
    return out
