"""Blind image-level harmonization baselines.

Two classical references the flow pipeline is compared against:

* subject-level histogram matching against a pooled target-domain CDF;
* spectrum swapping (SSIMH): replace the low-frequency 3D DCT
  coefficients of a source volume with those of the averaged target
  volume, leaving the source's high-frequency structure alone.

The DCT pair is the orthonormal type-II/type-III transform, separable
per axis, delegated to scipy.fft behind this module's contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from .errors import DataError, DegenerateInputError, UsageError
from .volume import Volume3D


@dataclass(frozen=True)
class TargetHistogram:
    """Pooled empirical CDF of target-domain intensities over [0, 1]."""

    cdf: np.ndarray
    bins: int

    def __post_init__(self):
        cdf = np.ascontiguousarray(self.cdf, dtype=np.float64)
        if cdf.shape != (self.bins,):
            raise DataError(f"cdf must have {self.bins} entries, got {cdf.shape}")
        if (np.diff(cdf) < 0).any() or abs(cdf[-1] - 1.0) > 1e-9:
            raise DataError("cdf must be non-decreasing and end at 1")
        cdf.setflags(write=False)
        object.__setattr__(self, "cdf", cdf)


def _bin_centers(bins: int) -> np.ndarray:
    edges = np.linspace(0.0, 1.0, bins + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def _binned_cdf(values: np.ndarray, bins: int) -> np.ndarray:
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return np.cumsum(counts) / values.size


def build_target_histogram(volumes: list[Volume3D], bins: int = 1024) -> TargetHistogram:
    """Pooled empirical CDF over every voxel of the given normalized volumes."""
    if not volumes:
        raise DataError("need at least one target volume")
    if bins < 2:
        raise UsageError("bins must be >= 2")
    counts = np.zeros(bins, dtype=np.int64)
    total = 0
    for v in volumes:
        c, _ = np.histogram(np.clip(v.data, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
        counts += c
        total += v.n_voxels
    return TargetHistogram(np.cumsum(counts) / total, bins)


def histogram_match(src: Volume3D, hist: TargetHistogram) -> Volume3D:
    """CDF matching: out = target_cdf^{-1}(source_cdf(x)), interpolated.

    Monotone in the input intensity, so voxel ordering (and with it edge
    structure, rank-wise) is preserved.
    """
    data = src.data.astype(np.float64)
    if data.min() == data.max():
        raise DegenerateInputError("source volume is constant; its CDF is degenerate")
    centers = _bin_centers(hist.bins)
    src_cdf = _binned_cdf(data, hist.bins)
    u = np.interp(data.ravel(), centers, src_cdf)
    # Strictly increasing abscissa for the inverse lookup; plateaus in the
    # target CDF (empty bins) get an epsilon ramp to keep interp monotone.
    tcdf = hist.cdf + np.arange(hist.bins) * 1e-12
    out = np.interp(u, tcdf, centers).reshape(src.dims)
    return src.with_data(out)


def dct3(v: Volume3D | np.ndarray) -> np.ndarray:
    """Orthonormal 3D DCT-II coefficients (float64 array)."""
    data = v.data if isinstance(v, Volume3D) else np.asarray(v)
    return sp_fft.dctn(data.astype(np.float64), type=2, norm="ortho")


def idct3(coeffs: np.ndarray) -> np.ndarray:
    """Inverse (orthonormal DCT-III); idct3(dct3(x)) == x to rounding."""
    return sp_fft.idctn(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho")


def _low_frequency_region(dims: tuple[int, int, int], cutoff: float) -> np.ndarray:
    """Coefficient indices with normalized l1 radius strictly below cutoff.

    Strict comparison makes cutoff 0 replace nothing; any cutoff >= 3
    covers every coefficient.
    """
    nx, ny, nz = dims
    u = np.arange(nx)[:, None, None] / nx
    w = np.arange(ny)[None, :, None] / ny
    q = np.arange(nz)[None, None, :] / nz
    return (u + w + q) < cutoff


def ssimh(src: Volume3D, target_mean: Volume3D, cutoff: float = 0.05) -> Volume3D:
    """Replace the low-frequency DCT band of ``src`` with ``target_mean``'s.

    Idempotent for a fixed target and cutoff (the replaced band is already
    the target's on a second application), hence the output is not
    clamped; values may leave [0, 1] slightly.
    """
    if src.dims != target_mean.dims:
        raise DataError(f"dims mismatch: {src.dims} vs {target_mean.dims}")
    if cutoff < 0:
        raise UsageError("cutoff must be >= 0")
    region = _low_frequency_region(src.dims, cutoff)
    if region.all():
        # Full replacement is exactly the identity on target_mean; skip the
        # transform round trip so "returns target_mean" holds bit-for-bit.
        return src.with_data(target_mean.data)
    coeffs = dct3(src)
    coeffs[region] = dct3(target_mean)[region]
    return src.with_data(idct3(coeffs))


def mean_volume(volumes: list[Volume3D]) -> Volume3D:
    """Voxelwise mean of same-shaped volumes (the SSIMH target reference)."""
    if not volumes:
        raise DataError("need at least one volume to average")
    dims = volumes[0].dims
    acc = np.zeros(dims, dtype=np.float64)
    for v in volumes:
        if v.dims != dims:
            raise DataError("volumes must share dims to be averaged")
        acc += v.data
    return volumes[0].with_data(acc / len(volumes))
