"""Patch embedders.

Two embedders share one interface: ``feature_map(patch, stream)`` maps an
(h, w, C_in) patch to a (C, h', w') array. ``stream`` is one of "V", "T"
(single-modality paths) or "FV", "FT" (the two halves of the fusion path).

``ConvEmbedder`` is one valid 3x3 convolution followed by tanh; valid
convolution means embedding a crop gives exactly the restriction of the
full-image feature map, which the detector relies on to pool windows from a
single full-image pass.
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import FeatureMap, Modality

STREAMS = ("V", "T", "FV", "FT")
STREAM_INPUT_CHANNELS = {"V": 3, "T": 1, "FV": 3, "FT": 1}
KERNEL = 3


def pad_to_kernel(patch: np.ndarray) -> np.ndarray:
    """Edge-pad patches smaller than the kernel so valid convolution has one output."""
    h, w = patch.shape[:2]
    ph, pw = max(KERNEL - h, 0), max(KERNEL - w, 0)
    if ph == 0 and pw == 0:
        return patch
    return np.pad(patch, ((0, ph), (0, pw), (0, 0)), mode="edge")


def im2col(x_chw: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, (H-2)*(W-2)) columns for a valid 3x3 convolution."""
    c = x_chw.shape[0]
    win = sliding_window_view(x_chw, (KERNEL, KERNEL), axis=(1, 2))  # C, H', W', 3, 3
    ho, wo = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * KERNEL * KERNEL, ho * wo)


class HandcraftedEmbedder:
    """Deterministic per-pixel features whose spatial mean gives patch statistics.

    Channels: input intensities, four gradient-orientation bins weighted by
    gradient magnitude, and squared deviation from the patch mean (its mean is
    the intensity variance). Output has C_in + 5 channels.
    """

    n_bins = 4

    def feature_map(self, patch: np.ndarray, stream: str = "V") -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.size == 0:
            raise ValueError("empty patch")
        h, w, _ = patch.shape
        intens = patch.transpose(2, 0, 1)
        gray = patch.mean(axis=2)
        gy = np.zeros_like(gray)
        gx = np.zeros_like(gray)
        if h > 1:
            gy = np.gradient(gray, axis=0)
        if w > 1:
            gx = np.gradient(gray, axis=1)
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), np.pi)
        bins = np.minimum((ang / (np.pi / self.n_bins)).astype(int), self.n_bins - 1)
        hist = np.zeros((self.n_bins, h, w))
        for k in range(self.n_bins):
            hist[k] = np.where(bins == k, mag, 0.0)
        var = (gray - gray.mean())[None] ** 2
        return np.concatenate([intens, hist, var], axis=0)

    def out_channels(self, stream: str) -> int:
        return STREAM_INPUT_CHANNELS[stream] + self.n_bins + 1


class ConvEmbedder:
    """Per-stream 3x3 valid convolution + tanh, inputs centred at 0.5."""

    def __init__(self, weights: Dict[str, Tuple[np.ndarray, np.ndarray]]):
        self.weights = weights

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int = 8) -> "ConvEmbedder":
        weights = {}
        for s in STREAMS:
            cin = STREAM_INPUT_CHANNELS[s]
            scale = 1.0 / np.sqrt(cin * KERNEL * KERNEL)
            w = rng.normal(0.0, scale, size=(channels, cin, KERNEL, KERNEL)) * 2.0
            weights[s] = (w, np.zeros(channels))
        return cls(weights)

    def feature_map(self, patch: np.ndarray, stream: str = "V") -> np.ndarray:
        w, b = self.weights[stream]
        x = pad_to_kernel(np.asarray(patch, dtype=np.float64)).transpose(2, 0, 1) - 0.5
        return conv_tanh(x, w, b)[0]

    def out_channels(self, stream: str) -> int:
        return self.weights[stream][0].shape[0]


def conv_tanh(x_chw: np.ndarray, w: np.ndarray, b: np.ndarray, cols: np.ndarray | None = None):
    """Returns (activations (C, H-2, W-2), im2col columns)."""
    if cols is None:
        cols = im2col(x_chw)
    ho, wo = x_chw.shape[1] - KERNEL + 1, x_chw.shape[2] - KERNEL + 1
    z = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return np.tanh(z).reshape(w.shape[0], ho, wo), cols


def embed_patch(patch_v: np.ndarray, patch_t: np.ndarray, modality, embedder) -> FeatureMap:
    """Feature map of one box for one path; fusion concatenates its V and T maps."""
    m = Modality(modality)
    if m is Modality.V:
        return FeatureMap(embedder.feature_map(patch_v, "V"))
    if m is Modality.T:
        return FeatureMap(embedder.feature_map(patch_t, "T"))
    fv = embedder.feature_map(patch_v, "FV")
    ft = embedder.feature_map(patch_t, "FT")
    return FeatureMap(np.concatenate([fv, ft], axis=0))
