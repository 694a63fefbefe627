# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the hot kernels in py_ops.

Direct loop nests instead of im2col: no large intermediate copies, which
wins at the small patch sizes used for training. Results match the numpy
path to rounding (summation order differs). Layouts are identical to
py_ops: activations (B, C, X, Y, Z), kernels (Co, Ci, kx, ky, kz).
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

NAME = "compiled"

ctypedef fused real_t:
    float
    double

cdef inline Py_ssize_t _wrap(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return i + n
    if i >= n:
        return i - n
    return i


def conv3d_forward(real_t[:, :, :, :, ::1] x, real_t[:, :, :, :, ::1] w,
                   real_t[::1] b, str pad="zero"):
    cdef Py_ssize_t nb = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t nx = x.shape[2], ny = x.shape[3], nz = x.shape[4]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t kx = w.shape[2], ky = w.shape[3], kz = w.shape[4]
    cdef Py_ssize_t rx = kx // 2, ry = ky // 2, rz = kz // 2
    cdef bint periodic = pad == "periodic"
    if not periodic and pad != "zero":
        raise ValueError(f"unknown pad mode {pad!r}")

    if real_t is float:
        out_np = np.empty((nb, co, nx, ny, nz), dtype=np.float32)
    else:
        out_np = np.empty((nb, co, nx, ny, nz), dtype=np.float64)
    cdef real_t[:, :, :, :, ::1] out = out_np

    cdef Py_ssize_t ib, o, c, i, j, k, di, dj, dk, ii, jj, kk
    cdef real_t acc
    with nogil:
        for ib in range(nb):
            for o in range(co):
                for i in range(nx):
                    for j in range(ny):
                        for k in range(nz):
                            acc = b[o]
                            for c in range(ci):
                                for di in range(kx):
                                    ii = i + di - rx
                                    if periodic:
                                        ii = _wrap(ii, nx)
                                    elif ii < 0 or ii >= nx:
                                        continue
                                    for dj in range(ky):
                                        jj = j + dj - ry
                                        if periodic:
                                            jj = _wrap(jj, ny)
                                        elif jj < 0 or jj >= ny:
                                            continue
                                        for dk in range(kz):
                                            kk = k + dk - rz
                                            if periodic:
                                                kk = _wrap(kk, nz)
                                            elif kk < 0 or kk >= nz:
                                                continue
                                            acc += w[o, c, di, dj, dk] * x[ib, c, ii, jj, kk]
                            out[ib, o, i, j, k] = acc
    return out_np


def conv3d_grad_input(real_t[:, :, :, :, ::1] gy, real_t[:, :, :, :, ::1] w,
                      str pad="zero"):
    # Same-size transposed convolution: scatter each output gradient back
    # through the kernel. Implemented as a gather with the flipped kernel.
    cdef Py_ssize_t nb = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t nx = gy.shape[2], ny = gy.shape[3], nz = gy.shape[4]
    cdef Py_ssize_t ci = w.shape[1]
    cdef Py_ssize_t kx = w.shape[2], ky = w.shape[3], kz = w.shape[4]
    cdef Py_ssize_t rx = kx // 2, ry = ky // 2, rz = kz // 2
    cdef bint periodic = pad == "periodic"
    if not periodic and pad != "zero":
        raise ValueError(f"unknown pad mode {pad!r}")

    if real_t is float:
        gx_np = np.zeros((nb, ci, nx, ny, nz), dtype=np.float32)
    else:
        gx_np = np.zeros((nb, ci, nx, ny, nz), dtype=np.float64)
    cdef real_t[:, :, :, :, ::1] gx = gx_np

    cdef Py_ssize_t ib, o, c, i, j, k, di, dj, dk, ii, jj, kk
    cdef real_t acc
    with nogil:
        for ib in range(nb):
            for c in range(ci):
                for i in range(nx):
                    for j in range(ny):
                        for k in range(nz):
                            acc = 0
                            for o in range(co):
                                for di in range(kx):
                                    ii = i - (di - rx)
                                    if periodic:
                                        ii = _wrap(ii, nx)
                                    elif ii < 0 or ii >= nx:
                                        continue
                                    for dj in range(ky):
                                        jj = j - (dj - ry)
                                        if periodic:
                                            jj = _wrap(jj, ny)
                                        elif jj < 0 or jj >= ny:
                                            continue
                                        for dk in range(kz):
                                            kk = k - (dk - rz)
                                            if periodic:
                                                kk = _wrap(kk, nz)
                                            elif kk < 0 or kk >= nz:
                                                continue
                                            acc += w[o, c, di, dj, dk] * gy[ib, o, ii, jj, kk]
                            gx[ib, c, i, j, k] = acc
    return gx_np


def conv3d_grad_weight(real_t[:, :, :, :, ::1] x, real_t[:, :, :, :, ::1] gy,
                       tuple kshape, str pad="zero"):
    cdef Py_ssize_t nb = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t nx = x.shape[2], ny = x.shape[3], nz = x.shape[4]
    cdef Py_ssize_t co = gy.shape[1]
    cdef Py_ssize_t kx = kshape[0], ky = kshape[1], kz = kshape[2]
    cdef Py_ssize_t rx = kx // 2, ry = ky // 2, rz = kz // 2
    cdef bint periodic = pad == "periodic"
    if not periodic and pad != "zero":
        raise ValueError(f"unknown pad mode {pad!r}")

    if real_t is float:
        gw_np = np.zeros((co, ci, kx, ky, kz), dtype=np.float32)
        gb_np = np.zeros(co, dtype=np.float32)
    else:
        gw_np = np.zeros((co, ci, kx, ky, kz), dtype=np.float64)
        gb_np = np.zeros(co, dtype=np.float64)
    cdef real_t[:, :, :, :, ::1] gw = gw_np
    cdef real_t[::1] gb = gb_np

    cdef Py_ssize_t ib, o, c, i, j, k, di, dj, dk, ii, jj, kk
    cdef real_t g, acc
    with nogil:
        for ib in range(nb):
            for o in range(co):
                acc = 0
                for i in range(nx):
                    for j in range(ny):
                        for k in range(nz):
                            acc += gy[ib, o, i, j, k]
                gb[o] += acc
        for ib in range(nb):
            for o in range(co):
                for c in range(ci):
                    for di in range(kx):
                        for dj in range(ky):
                            for dk in range(kz):
                                acc = 0
                                for i in range(nx):
                                    ii = i + di - rx
                                    if periodic:
                                        ii = _wrap(ii, nx)
                                    elif ii < 0 or ii >= nx:
                                        continue
                                    for j in range(ny):
                                        jj = j + dj - ry
                                        if periodic:
                                            jj = _wrap(jj, ny)
                                        elif jj < 0 or jj >= ny:
                                            continue
                                        for k in range(nz):
                                            kk = k + dk - rz
                                            if periodic:
                                                kk = _wrap(kk, nz)
                                            elif kk < 0 or kk >= nz:
                                                continue
                                            acc += gy[ib, o, i, j, k] * x[ib, c, ii, jj, kk]
                                gw[o, c, di, dj, dk] += acc
    return gw_np, gb_np


def nms26(double[:, :, ::1] mag, double[:, :, ::1] gx, double[:, :, ::1] gy,
          double[:, :, ::1] gz):
    """Same contract as py_ops.nms26 (see there for the semantics)."""
    cdef Py_ssize_t nx = mag.shape[0], ny = mag.shape[1], nz = mag.shape[2]
    out_np = np.zeros((nx, ny, nz), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_np

    # Fixed enumeration matching py_ops.NEIGHBOR_OFFSETS.
    cdef long[:, ::1] offs = np.array(
        [(dx, dy, dz)
         for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
         if (dx, dy, dz) != (0, 0, 0)],
        dtype=np.int64,
    )
    cdef double[:, ::1] dirs = np.asarray(offs, dtype=np.float64)
    cdef Py_ssize_t d
    cdef double norm
    norms_np = np.linalg.norm(np.asarray(offs, dtype=np.float64), axis=1)
    cdef double[::1] norms = norms_np
    for d in range(26):
        dirs[d, 0] /= norms[d]
        dirs[d, 1] /= norms[d]
        dirs[d, 2] /= norms[d]

    cdef Py_ssize_t i, j, k, best, ii, jj, kk
    cdef double m, score, best_score, fwd, bwd
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    m = mag[i, j, k]
                    if m <= 0:
                        continue
                    best = 0
                    best_score = (gx[i, j, k] * dirs[0, 0] + gy[i, j, k] * dirs[0, 1]
                                  + gz[i, j, k] * dirs[0, 2])
                    for d in range(1, 26):
                        score = (gx[i, j, k] * dirs[d, 0] + gy[i, j, k] * dirs[d, 1]
                                 + gz[i, j, k] * dirs[d, 2])
                        if score > best_score:
                            best_score = score
                            best = d
                    ii = i + offs[best, 0]
                    jj = j + offs[best, 1]
                    kk = k + offs[best, 2]
                    fwd = 0
                    if 0 <= ii < nx and 0 <= jj < ny and 0 <= kk < nz:
                        fwd = mag[ii, jj, kk]
                    ii = i - offs[best, 0]
                    jj = j - offs[best, 1]
                    kk = k - offs[best, 2]
                    bwd = 0
                    if 0 <= ii < nx and 0 <= jj < ny and 0 <= kk < nz:
                        bwd = mag[ii, jj, kk]
                    if m >= fwd and m >= bwd:
                        out[i, j, k] = 1
    return out_np.astype(bool)
