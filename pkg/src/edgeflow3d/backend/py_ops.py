"""Pure-numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable
and the reference the extension is tested against. Convolutions go
through an im2col + GEMM path; non-maximum suppression works on shifted
views. Both give results matching the compiled kernels to rounding.

Array layout for convolutions is ``(batch, channels, x, y, z)``; kernels
are ``(c_out, c_in, kx, ky, kz)`` with odd spatial extents ("same"
output size). ``pad`` selects how the input is extended: ``"zero"``
(default for the network) or ``"periodic"`` (used by shift-covariance
tests).
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _pad(x: np.ndarray, r: tuple[int, int, int], pad: str) -> np.ndarray:
    if pad == "periodic":
        width = ((0, 0), (0, 0), (r[0], r[0]), (r[1], r[1]), (r[2], r[2]))
        return np.pad(x, width, mode="wrap")
    if pad != "zero":
        raise ValueError(f"unknown pad mode {pad!r}")
    nb, c, nx, ny, nz = x.shape
    out = np.zeros((nb, c, nx + 2 * r[0], ny + 2 * r[1], nz + 2 * r[2]), dtype=x.dtype)
    out[:, :, r[0] : r[0] + nx, r[1] : r[1] + ny, r[2] : r[2] + nz] = x
    return out


def _radii(w: np.ndarray) -> tuple[int, int, int]:
    kx, ky, kz = w.shape[2:]
    if kx % 2 == 0 or ky % 2 == 0 or kz % 2 == 0:
        raise ValueError("kernel extents must be odd")
    return kx // 2, ky // 2, kz // 2


def _im2col(xp: np.ndarray, spatial: tuple[int, int, int], kshape: tuple[int, int, int]) -> np.ndarray:
    # GEMM-ready matrix (C*kx*ky*kz, B*X*Y*Z), filled by one shifted block
    # copy per kernel offset; rows follow the (c, di, dj, dk) order of a
    # raveled kernel so `w.reshape(Co, -1) @ cols` is the convolution.
    nb, c = xp.shape[:2]
    nx, ny, nz = spatial
    kx, ky, kz = kshape
    cols = np.empty((c, kx, ky, kz, nb, nx, ny, nz), dtype=xp.dtype)
    for di in range(kx):
        for dj in range(ky):
            for dk in range(kz):
                block = xp[:, :, di : di + nx, dj : dj + ny, dk : dk + nz]
                cols[:, di, dj, dk] = block.transpose(1, 0, 2, 3, 4)
    return cols.reshape(c * kx * ky * kz, nb * nx * ny * nz)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: str = "zero") -> np.ndarray:
    r = _radii(w)
    nb, _, nx, ny, nz = x.shape
    co = w.shape[0]
    cols = _im2col(_pad(x, r, pad), (nx, ny, nz), w.shape[2:])
    out = w.reshape(co, -1) @ cols
    out += b[:, None]
    return np.ascontiguousarray(
        out.reshape(co, nb, nx, ny, nz).transpose(1, 0, 2, 3, 4)
    )


def conv3d_grad_input(gy: np.ndarray, w: np.ndarray, pad: str = "zero") -> np.ndarray:
    # Gradient w.r.t. the input of a "same" convolution: correlate the
    # output gradient with the spatially flipped, channel-transposed kernel.
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    zeros = np.zeros(wt.shape[0], dtype=gy.dtype)
    return conv3d_forward(gy, wt, zeros, pad)


def conv3d_grad_weight(
    x: np.ndarray, gy: np.ndarray, kshape: tuple[int, int, int], pad: str = "zero"
) -> tuple[np.ndarray, np.ndarray]:
    r = (kshape[0] // 2, kshape[1] // 2, kshape[2] // 2)
    nb, ci, nx, ny, nz = x.shape
    co = gy.shape[1]
    cols = _im2col(_pad(x, r, pad), (nx, ny, nz), kshape)
    gmat = np.ascontiguousarray(gy.transpose(1, 0, 2, 3, 4)).reshape(co, -1)
    gw = (gmat @ cols.T).reshape(co, ci, *kshape)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gw, gb


# The 26 neighbor offsets of a voxel, a fixed enumeration shared with the
# compiled kernel so direction quantization ties break identically.
NEIGHBOR_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)
_UNIT_DIRS = NEIGHBOR_OFFSETS / np.linalg.norm(NEIGHBOR_OFFSETS, axis=1, keepdims=True)


def nms26(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray, gz: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along the quantized 3D gradient direction.

    Each voxel's gradient is snapped to the nearest of its 26 neighbor
    directions (largest dot product, first winner on ties); the voxel
    survives when its magnitude is >= both neighbors along that axis.
    Out-of-bounds neighbors count as magnitude 0 and zero-gradient voxels
    never survive.
    """
    nx, ny, nz = mag.shape
    g = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    scores = g @ _UNIT_DIRS.T  # |g| scaling does not change the argmax
    best = np.argmax(scores, axis=1)
    offs = NEIGHBOR_OFFSETS[best].reshape(nx, ny, nz, 3)

    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=mag.dtype)
    padded[1:-1, 1:-1, 1:-1] = mag
    ix, iy, iz = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    fwd = padded[ix + 1 + offs[..., 0], iy + 1 + offs[..., 1], iz + 1 + offs[..., 2]]
    bwd = padded[ix + 1 - offs[..., 0], iy + 1 - offs[..., 1], iz + 1 - offs[..., 2]]
    return (mag > 0) & (mag >= fwd) & (mag >= bwd)
