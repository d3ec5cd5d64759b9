"""Class activation maps from the final conv features and the head weights."""
from __future__ import annotations

import numpy as np

from .net import MiniNet


def class_activation_map(net: MiniNet, image: np.ndarray, k: int) -> np.ndarray:
    """Heatmap in [0, 1] at the input resolution for one image (H x W x channels)."""
    if not 0 <= k < net.config.num_classes:
        raise IndexError(f"class index {k} outside [0, {net.config.num_classes})")
    if image.ndim != 3:
        raise ValueError(f"expected a single H x W x channels image, got shape {image.shape}")
    feats = net.features(image[None])[0].astype(np.float64)
    cam = feats @ net.params["head.weight"][:, k].astype(np.float64)
    lo, hi = cam.min(), cam.max()
    cam = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    h, w = image.shape[:2]
    rows = (np.arange(h) * cam.shape[0]) // h
    cols = (np.arange(w) * cam.shape[1]) // w
    return cam[rows[:, None], cols[None, :]]


def heatmap_peak(heatmap: np.ndarray) -> tuple[float, float]:
    """Centre (row, col) of the maximal region; ties resolved by their mean position."""
    rr, cc = np.nonzero(heatmap == heatmap.max())
    return float(rr.mean()) + 0.5, float(cc.mean()) + 0.5
