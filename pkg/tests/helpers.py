"""Shared synthetic inputs for the unit tests (not oracles)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from edgeflow3d.volume import Volume3D


def ball_volume(n=48, radius=14, inner=0.8):
    idx = np.arange(n)
    xx, yy, zz = np.meshgrid(idx, idx, idx, indexing="ij")
    c = (n - 1) / 2
    r2 = (xx - c) ** 2 + (yy - c) ** 2 + (zz - c) ** 2
    data = np.where(r2 < radius**2, inner, 0.0).astype(np.float32)
    return Volume3D((n, n, n), (1, 1, 1), data), np.sqrt(r2)


def textured_volume(n=40, seed=0):
    """Nested intensity shells plus smooth texture: rich enough gradient
    structure that the 8% edge-fraction target is reachable."""
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    xx, yy, zz = np.meshgrid(idx, idx, idx, indexing="ij")
    c = (n - 1) / 2
    r = np.sqrt((xx - c) ** 2 + (yy - c) ** 2 + (zz - c) ** 2)
    data = np.select([r < n * 0.18, r < n * 0.3, r < n * 0.42], [0.9, 0.45, 0.65], 0.05)
    data = data + 0.04 * gaussian_filter(rng.standard_normal((n, n, n)), 2.0)
    data = gaussian_filter(data, 0.8)
    data = np.clip(data, 0, 1)
    return Volume3D((n, n, n), (1, 1, 1), data)
