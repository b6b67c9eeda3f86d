"""Anomaly localization maps and image-level scores."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .core import as_tensor, gaussian_blur, upsample_bilinear
from .errors import ValidationError


def fuse_and_localize(maps: Mapping, out_h: int, out_w: int, sigma: float = 4.0) -> np.ndarray:
    """Pixel-level anomaly map, (n, 1, out_h, out_w).

    Per level the modality maps are combined by root-sum-square, resized to
    the input resolution and Gaussian-smoothed; the levels are then averaged.
    """
    if not maps:
        raise ValidationError("no anomaly maps to fuse")
    modalities = sorted({m for m, _ in maps})
    levels = sorted({l for _, l in maps})
    missing = [(m, l) for m in modalities for l in levels if (m, l) not in maps]
    if missing:
        raise ValidationError(f"anomaly maps missing for (modality, level) {missing}")
    total = None
    for l in levels:
        sq = None
        for m in modalities:
            a = np.asarray(as_tensor(maps[(m, l)]).data, dtype=np.float64)
            sq = a * a if sq is None else sq + a * a
        rss = np.sqrt(sq)[:, None]
        level_map = gaussian_blur(upsample_bilinear(rss, out_h, out_w), sigma).data
        total = level_map if total is None else total + level_map
    out = total / len(levels)
    dtype = as_tensor(maps[(modalities[0], levels[0])]).dtype
    return np.maximum(out, 0).astype(dtype)


def top_k_count(h: int, w: int) -> int:
    return max(1, math.floor(0.001 * h * w))


def image_score(s_al) -> float | np.ndarray:
    """Mean of the top 0.1% pixels (at least one).

    Accepts one (H, W) / (1, 1, H, W) map, or a batch (n, 1, H, W) and then
    returns one score per map.
    """
    a = np.asarray(as_tensor(s_al).data, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    h, w = a.shape[-2:]
    if h * w == 0:
        raise ValidationError("empty localization map")
    k = top_k_count(h, w)
    flat = a.reshape(a.shape[0], -1)
    top = -np.sort(-flat, axis=1)[:, :k]
    scores = top.mean(axis=1)
    return float(scores[0]) if scores.shape[0] == 1 else scores
