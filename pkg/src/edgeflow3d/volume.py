"""Core 3D scalar volume type, file I/O, normalization and index resampling.

A :class:`Volume3D` stores its voxels as a C-ordered ``float32`` array of
shape ``(nx, ny, nz)``; index ``(i, j, k)`` maps to flat offset
``i*ny*nz + j*nz + k`` (the z axis varies fastest). Volumes are immutable
after construction and all operations here are pure functions, so values
can be shared freely across threads.

Two file formats are supported:

* ``raw-v1``: the package's own container. 32-byte little-endian header
  ``magic "HVOL" | version u16 | dims 3*u32 | spacing 3*f32 | flags u16``
  followed by the C-ordered float32 payload and, when flag bit 0 is set,
  a uint8 mask payload. Flag bit 1 marks a binary (0/1) payload such as a
  serialized edge map. Saving and re-loading reproduces a volume exactly.
* ``nifti1``: read-only ingestion of uncompressed NIfTI-1 files limited to
  float32 and int16 payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError, FormatError, UsageError

RAW_MAGIC = b"HVOL"
RAW_VERSION = 1
RAW_HEADER = struct.Struct("<4sH3I3fH")  # 32 bytes
FLAG_MASK = 0x1
FLAG_BINARY = 0x2

_NIFTI_DTYPES = {4: np.dtype("int16"), 16: np.dtype("float32")}


@dataclass(frozen=True)
class Volume3D:
    """Dense scalar 3D grid with voxel spacing and an optional mask."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise DataError(f"dims must be three positive ints, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(dims)
        if not np.isfinite(data).all():
            raise DataError("volume data contains NaN or Inf")
        data.setflags(write=False)
        mask = self.mask
        if mask is not None:
            mask = np.ascontiguousarray(mask, dtype=bool).reshape(dims)
            mask.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def with_data(self, data: np.ndarray, mask: np.ndarray | None = None) -> "Volume3D":
        """New volume sharing dims/spacing, replacing data (and optionally mask)."""
        return Volume3D(self.dims, self.spacing, data, self.mask if mask is None else mask)

    def allclose(self, other: "Volume3D", atol: float = 0.0) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.data, other.data, atol=atol, rtol=0.0)
        )


@dataclass(frozen=True)
class NormalizationRecord:
    """Percentile anchors of a normalization, kept so it can be inverted."""

    p_low: float
    p_high: float
    percentiles: tuple[float, float] = (1.0, 99.0)

    def __post_init__(self):
        if not self.p_high > self.p_low:
            raise DegenerateInputError(
                f"p_high ({self.p_high}) must exceed p_low ({self.p_low})"
            )

    def invert(self, v: Volume3D) -> Volume3D:
        """Map normalized intensities back to the original range (clamp loss aside)."""
        data = v.data.astype(np.float64) * (self.p_high - self.p_low) + self.p_low
        return v.with_data(data)


def save_volume(v: Volume3D, path, *, binary: bool = False) -> None:
    """Write ``v`` to ``path`` in raw-v1 format.

    The output is byte-deterministic, and loading it back reproduces the
    volume exactly (float32 payload matches the in-memory representation).
    """
    flags = 0
    if v.mask is not None:
        flags |= FLAG_MASK
    if binary:
        flags |= FLAG_BINARY
    header = RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, *v.dims, *v.spacing, flags)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.asarray(v.data, dtype="<f4").tobytes())
            if v.mask is not None:
                fh.write(v.mask.astype(np.uint8).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write volume to {path}: {exc}") from exc


def load_volume(path, format: str = "auto") -> Volume3D:
    """Read a volume from ``path``.

    ``format`` is one of ``raw-v1``, ``nifti1`` or ``auto`` (sniff the
    4-byte raw magic, otherwise try NIfTI-1).
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if format == "auto":
        format = "raw-v1" if blob[:4] == RAW_MAGIC else "nifti1"
    if format == "raw-v1":
        return _parse_raw(blob, path)
    if format == "nifti1":
        return _parse_nifti1(blob, path)
    raise UsageError(f"unknown volume format {format!r}")


def load_flags(path) -> int:
    """Header flags of a raw-v1 file (e.g. to detect binary payloads)."""
    with open(path, "rb") as fh:
        head = fh.read(RAW_HEADER.size)
    magic, version, *_rest, flags = _unpack_raw_header(head, path)
    return flags


def _unpack_raw_header(head: bytes, path):
    if len(head) < RAW_HEADER.size:
        raise FormatError(f"{path}: truncated raw-v1 header")
    magic, version, nx, ny, nz, sx, sy, sz, flags = RAW_HEADER.unpack(head[: RAW_HEADER.size])
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise FormatError(f"{path}: unsupported raw-v1 version {version}")
    return magic, version, nx, ny, nz, sx, sy, sz, flags


def _parse_raw(blob: bytes, path) -> Volume3D:
    _, _, nx, ny, nz, sx, sy, sz, flags = _unpack_raw_header(blob, path)
    n = nx * ny * nz
    offset = RAW_HEADER.size
    need = offset + 4 * n + (n if flags & FLAG_MASK else 0)
    if len(blob) != need:
        raise FormatError(
            f"{path}: payload length {len(blob) - offset} does not match dims "
            f"({nx},{ny},{nz}) with flags {flags:#x}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(nx, ny, nz)
    mask = None
    if flags & FLAG_MASK:
        mask = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset + 4 * n)
        mask = mask.reshape(nx, ny, nz).astype(bool)
    return Volume3D((nx, ny, nz), (sx, sy, sz), data, mask)


def _parse_nifti1(blob: bytes, path) -> Volume3D:
    if len(blob) < 348:
        raise FormatError(f"{path}: too short for a NIfTI-1 header")
    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(order + "i", blob[:4])
        if sizeof_hdr == 348:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack(order + "8h", blob[40:56])
    datatype, _bitpix = struct.unpack(order + "2h", blob[70:74])
    pixdim = struct.unpack(order + "8f", blob[76:108])
    (vox_offset,) = struct.unpack(order + "f", blob[108:112])
    scl_slope, scl_inter = struct.unpack(order + "2f", blob[112:120])
    ndim = dim[0]
    if ndim < 3:
        raise FormatError(f"{path}: need 3 spatial dimensions, header says {ndim}")
    if any(d > 1 for d in dim[4 : ndim + 1]):
        raise FormatError(f"{path}: non-singleton trailing dimensions unsupported")
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    nx, ny, nz = (int(d) for d in dim[1:4])
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {dim[1:4]}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(order)
    off = int(vox_offset)
    if off < 348 or off + nx * ny * nz * dtype.itemsize > len(blob):
        raise FormatError(f"{path}: payload does not fit (vox_offset={off})")
    raw = np.frombuffer(blob, dtype=dtype, count=nx * ny * nz, offset=off)
    # NIfTI stores x fastest; reshape in Fortran order to get (nx, ny, nz).
    data = raw.reshape((nx, ny, nz), order="F").astype(np.float64)
    if scl_slope not in (0.0,) and np.isfinite(scl_slope):
        data = data * scl_slope + (scl_inter if np.isfinite(scl_inter) else 0.0)
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    return Volume3D((nx, ny, nz), spacing, data)


def normalize_percentile(
    v: Volume3D, lo: float = 1.0, hi: float = 99.0
) -> tuple[Volume3D, NormalizationRecord]:
    """Percentile-anchored min-max normalization, clamped to [0, 1].

    Anchors are the ``lo`` and ``hi`` percentiles of all voxels (linear
    interpolation between order statistics). The output is
    ``clamp((x - p_lo) / (p_hi - p_lo), 0, 1)``, which is monotone in the
    input. A constant volume has no spread between anchors and is rejected.
    """
    if not hi > lo:
        raise UsageError(f"hi percentile ({hi}) must exceed lo ({lo})")
    data = v.data.astype(np.float64)
    p_low, p_high = np.percentile(data, [lo, hi])
    if not p_high > p_low:
        raise DegenerateInputError(
            f"degenerate volume: percentiles {lo} and {hi} coincide at {p_low}"
        )
    out = np.clip((data - p_low) / (p_high - p_low), 0.0, 1.0)
    record = NormalizationRecord(float(p_low), float(p_high), (float(lo), float(hi)))
    return v.with_data(out), record


def index_downsample(v: Volume3D, stride: tuple[int, int, int]) -> Volume3D:
    """Strided index decimation: output voxel (i,j,k) = input (a*i, b*j, c*k).

    No interpolation is involved, so voxel values pass through exactly and
    the operation commutes with any voxelwise map. Spacing grows by the
    stride. Dims must divide evenly.
    """
    a, b, c = (int(s) for s in stride)
    if min(a, b, c) < 1:
        raise UsageError(f"stride components must be >= 1, got {stride}")
    nx, ny, nz = v.dims
    if nx % a or ny % b or nz % c:
        raise DataError(f"dims {v.dims} not divisible by stride {stride}")
    data = v.data[::a, ::b, ::c]
    mask = v.mask[::a, ::b, ::c] if v.mask is not None else None
    sx, sy, sz = v.spacing
    return Volume3D((nx // a, ny // b, nz // c), (sx * a, sy * b, sz * c), data, mask)


def threshold_mask(v: Volume3D, frac: float) -> np.ndarray:
    """Boolean mask of voxels strictly above ``frac * max(v)``.

    Stands in for anatomy masks when computing masked metrics; an all-zero
    volume yields an empty mask.
    """
    if not 0.0 < frac < 1.0:
        raise UsageError(f"frac must lie in (0, 1), got {frac}")
    return v.data > frac * float(v.data.max())
