"""Training-sample construction: simple and multi-stride patches.

Patches never interpolate: every patch voxel is a full-volume voxel at
``origin + stride * index``, and the three coordinate channels record the
normalized full-volume position of exactly that voxel. A stride-n patch
therefore spans n times the spatial extent of a simple patch while
costing the same memory, which is how the model gets to see global
structure during patch-based training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edges import EdgeMap
from .errors import DataError, UsageError
from .volume import Volume3D


@dataclass(frozen=True)
class TrainingPatch:
    """Fixed-size data/edge/coordinate bundle with its sampling provenance."""

    data: np.ndarray  # (P,P,P) float32 target-image patch
    edge: np.ndarray  # (P,P,P) bool condition channel
    coords: tuple[np.ndarray, np.ndarray, np.ndarray]  # each (P,P,P) float32 in [-1,1]
    origin: tuple[int, int, int]
    stride: tuple[int, int, int]

    def __post_init__(self):
        shape = self.data.shape
        if self.edge.shape != shape or any(c.shape != shape for c in self.coords):
            raise DataError("patch tensors must share one shape")
        for c in self.coords:
            if c.size and (c.min() < -1.0 or c.max() > 1.0):
                raise DataError("coordinate channels must lie in [-1, 1]")


@dataclass(frozen=True)
class PatchSamplerConfig:
    patch_size: int = 64
    multistride_ratio: float = 0.2  # fraction of patches drawn multi-stride
    max_multiple: int | None = None  # per-axis cap; None = floor(dim / P)
    random_flip: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.patch_size < 2:
            raise UsageError(f"patch_size must be >= 2, got {self.patch_size}")
        if not 0.0 <= self.multistride_ratio <= 1.0:
            raise UsageError(f"multistride_ratio must be in [0,1], got {self.multistride_ratio}")
        if self.max_multiple is not None and self.max_multiple < 1:
            raise UsageError("max_multiple must be >= 1")


def coord_channels(
    dims: tuple[int, int, int],
    origin: tuple[int, int, int],
    stride: tuple[int, int, int],
    patch_size: int | tuple[int, int, int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized position channels for a patch sampled from a full volume.

    Along each axis, index m maps to ``2*(origin + stride*m)/(dim-1) - 1``,
    so a full-volume patch spans exactly [-1, 1].
    """
    p = (patch_size,) * 3 if isinstance(patch_size, int) else tuple(patch_size)
    axes = []
    for dim, o, s, n in zip(dims, origin, stride, p):
        last = o + s * (n - 1)
        if o < 0 or last >= dim:
            raise DataError(
                f"patch exceeds volume bounds: origin {o}, stride {s}, size {n}, dim {dim}"
            )
        idx = o + s * np.arange(n, dtype=np.float64)
        axes.append((2.0 * idx / (dim - 1) - 1.0) if dim > 1 else np.zeros(n))
    ci = np.broadcast_to(axes[0][:, None, None], p).astype(np.float32)
    cj = np.broadcast_to(axes[1][None, :, None], p).astype(np.float32)
    ck = np.broadcast_to(axes[2][None, None, :], p).astype(np.float32)
    return ci.copy(), cj.copy(), ck.copy()


def _crop(v: Volume3D, e: EdgeMap, origin, stride, p):
    sl = tuple(slice(o, o + s * p, s) for o, s in zip(origin, stride))
    return v.data[sl], e.bits[sl]


def sample_simple_patch(
    v: Volume3D, e: EdgeMap, cfg: PatchSamplerConfig, rng: np.random.Generator
) -> TrainingPatch:
    """Stride-1 patch at a uniformly random origin."""
    p = cfg.patch_size
    if any(d < p for d in v.dims):
        raise DataError(f"volume dims {v.dims} smaller than patch size {p}")
    origin = tuple(int(rng.integers(0, d - p + 1)) for d in v.dims)
    stride = (1, 1, 1)
    data, edge = _crop(v, e, origin, stride, p)
    return TrainingPatch(
        np.ascontiguousarray(data),
        np.ascontiguousarray(edge),
        coord_channels(v.dims, origin, stride, p),
        origin,
        stride,
    )


def sample_multistride_patch(
    v: Volume3D, e: EdgeMap, cfg: PatchSamplerConfig, rng: np.random.Generator
) -> TrainingPatch:
    """Patch formed by index-striding a random sub-volume.

    Per axis, a multiple n is drawn uniformly from 1..max_multiple, a
    sub-volume of extent n*P is cropped at a random origin, and the patch
    takes every n-th voxel of it. The edge channel is strided by the same
    indexing and the coordinate channels reflect the true full-volume
    positions of the sampled voxels.
    """
    p = cfg.patch_size
    if any(d < p for d in v.dims):
        raise DataError(f"volume dims {v.dims} smaller than patch size {p}")
    stride = []
    origin = []
    for d in v.dims:
        cap = d // p
        if cfg.max_multiple is not None:
            cap = min(cap, cfg.max_multiple)
        n = int(rng.integers(1, cap + 1))
        stride.append(n)
        origin.append(int(rng.integers(0, d - n * p + 1)))
    origin, stride = tuple(origin), tuple(stride)
    data, edge = _crop(v, e, origin, stride, p)
    return TrainingPatch(
        np.ascontiguousarray(data),
        np.ascontiguousarray(edge),
        coord_channels(v.dims, origin, stride, p),
        origin,
        stride,
    )


def _flip_patch(patch: TrainingPatch, axes: tuple[bool, bool, bool]) -> TrainingPatch:
    flip_axes = tuple(i for i, f in enumerate(axes) if f)
    if not flip_axes:
        return patch
    data = np.ascontiguousarray(np.flip(patch.data, flip_axes))
    edge = np.ascontiguousarray(np.flip(patch.edge, flip_axes))
    coords = []
    for i, c in enumerate(patch.coords):
        c = np.flip(c, flip_axes)
        if axes[i]:
            c = -c  # flipped axis reads as the mirrored global position
        coords.append(np.ascontiguousarray(c))
    return TrainingPatch(data, edge, tuple(coords), patch.origin, patch.stride)


def sample_batch(
    volumes: list[Volume3D],
    edges: list[EdgeMap],
    cfg: PatchSamplerConfig,
    rng: np.random.Generator,
    batch: int,
) -> list[TrainingPatch]:
    """Draw ``batch`` patches, each multi-stride with probability ρ.

    Volumes are picked uniformly; random axis flips (when enabled) act
    jointly on data, edge and coordinate tensors, negating the coordinate
    channel of each flipped axis.
    """
    if batch < 1:
        raise UsageError("batch must be >= 1")
    if not volumes:
        raise DataError("empty volume list")
    if len(volumes) != len(edges):
        raise DataError("volumes and edges lists must align")
    out = []
    for _ in range(batch):
        vi = int(rng.integers(0, len(volumes)))
        multistride = rng.random() < cfg.multistride_ratio
        sampler = sample_multistride_patch if multistride else sample_simple_patch
        patch = sampler(volumes[vi], edges[vi], cfg, rng)
        if cfg.random_flip:
            patch = _flip_patch(patch, tuple(rng.random() < 0.5 for _ in range(3)))
        out.append(patch)
    return out
