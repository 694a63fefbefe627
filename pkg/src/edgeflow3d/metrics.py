"""Masked image-fidelity metrics: PSNR, windowed 3D SSIM, Dice, MAE.

Metrics default to evaluation inside a threshold mask of the reference
volume, standing in for anatomy masks. SSIM uses a Gaussian window
(7^3, sigma 1.5 by default) and averages local values over valid window
positions (window fully inside the volume) whose center is masked; this
keeps the definition free of padding conventions and directly
brute-forceable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, DegenerateInputError, UsageError
from .volume import Volume3D, threshold_mask


@dataclass(frozen=True)
class MetricsReport:
    psnr_db: float  # +inf when MSE == 0
    ssim: float
    mask_voxels: int
    dice: dict[int, float] | None = None
    mae: float | None = None

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)

    def to_dict(self) -> dict:
        return {
            "psnr_db": None if self.psnr_infinite else self.psnr_db,
            "psnr_infinite": self.psnr_infinite,
            "ssim": self.ssim,
            "mask_voxels": self.mask_voxels,
            "dice": None if self.dice is None else {str(k): v for k, v in self.dice.items()},
            "mae": self.mae,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        dice = d.get("dice")
        return cls(
            psnr_db=math.inf if d.get("psnr_infinite") else float(d["psnr_db"]),
            ssim=float(d["ssim"]),
            mask_voxels=int(d["mask_voxels"]),
            dice=None if dice is None else {int(k): float(v) for k, v in dice.items()},
            mae=None if d.get("mae") is None else float(d["mae"]),
        )


def _data(x) -> np.ndarray:
    return x.data.astype(np.float64) if isinstance(x, Volume3D) else np.asarray(x, np.float64)


def _check_pair(a, b, mask):
    a = _data(a)
    b = _data(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise DataError("mask shape must match the volumes")
    if not mask.any():
        raise DegenerateInputError("empty evaluation mask")
    return a, b, mask


def psnr(a, b, mask: np.ndarray | None = None, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over the mask; infinite when MSE is zero."""
    a, b, mask = _check_pair(a, b, mask)
    diff = a[mask] - b[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    w = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * sigma**2))
    return w / w.sum()


def _local_mean(x: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    out = x
    for axis in range(3):
        out = ndimage.correlate1d(out, k1d, axis=axis, mode="constant")
    return out


def ssim3d(
    a,
    b,
    mask: np.ndarray | None = None,
    window: int = 7,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
) -> float:
    """Mean local SSIM with a 3D Gaussian window over valid masked centers."""
    a, b, mask = _check_pair(a, b, mask)
    if window % 2 == 0:
        raise UsageError("window must be odd")
    half = window // 2
    if any(s < window for s in a.shape):
        raise DataError(f"window {window} larger than volume {a.shape}")
    k1d = _gaussian_kernel1d(window, sigma)
    mu_a = _local_mean(a, k1d)
    mu_b = _local_mean(b, k1d)
    mu_aa = _local_mean(a * a, k1d)
    mu_bb = _local_mean(b * b, k1d)
    mu_ab = _local_mean(a * b, k1d)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    ssim_map = num / den
    valid = np.zeros(a.shape, dtype=bool)
    valid[half : a.shape[0] - half, half : a.shape[1] - half, half : a.shape[2] - half] = True
    sel = valid & mask
    if not sel.any():
        raise DegenerateInputError("no valid window centers inside the mask")
    return float(ssim_map[sel].mean())


def dice(seg_a: np.ndarray, seg_b: np.ndarray, label: int) -> float:
    """2|A n B| / (|A| + |B|) for one label; both empty counts as 1."""
    seg_a = np.asarray(seg_a)
    seg_b = np.asarray(seg_b)
    if seg_a.shape != seg_b.shape:
        raise DataError(f"shape mismatch: {seg_a.shape} vs {seg_b.shape}")
    a = seg_a == label
    b = seg_b == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def mae(pred, truth) -> float:
    """Mean absolute error between two equal-length scalar sequences."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != t.size:
        raise DataError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise DataError("empty input lists")
    return float(np.mean(np.abs(p - t)))


def evaluate_pair(
    pred: Volume3D,
    truth: Volume3D,
    mask: np.ndarray | str | None = "threshold",
    mask_frac: float = 0.05,
    ssim_window: int = 7,
) -> MetricsReport:
    """PSNR + SSIM report for a prediction against its reference.

    ``mask="threshold"`` (default) evaluates inside the reference's
    threshold mask; ``None`` uses the whole volume; an array is used
    directly.
    """
    if isinstance(mask, str):
        if mask != "threshold":
            raise UsageError(f"unknown mask mode {mask!r}")
        mask = threshold_mask(truth, mask_frac)
    return MetricsReport(
        psnr_db=psnr(pred, truth, mask),
        ssim=ssim3d(pred, truth, mask, window=ssim_window),
        mask_voxels=int(np.count_nonzero(mask)) if mask is not None else pred.n_voxels,
    )
