"""Differentiable velocity field: a small 3D conv encoder-decoder.

The field maps (noisy image, time, edge map, three coordinate channels)
to a predicted velocity of the same spatial shape. It is implemented
from scratch on numpy plus the package's conv kernels, with handwritten
backward passes, so gradients are exact and checkable against finite
differences without dragging in a framework.

Architecture (sized by :class:`FieldArch`):

* input: 5 channels (x_t, e, i, j, k) concatenated; scalar t per sample
  enters through a sinusoidal embedding and per-block learned
  scale-shift (FiLM) applied after RMS normalization;
* per level, a block of two "same" convolutions, each followed by
  per-channel RMS normalization, FiLM and SiLU;
* downsampling by space-to-channel rearrangement (8x channels, half
  resolution), upsampling by nearest-neighbor plus convolution, skip
  connections from encoder to decoder;
* final convolution to 1 channel, zero-initialized so the initial
  predicted velocity is exactly zero.

Parameters live in one flat vector; named views into it are created once
so the optimizer can treat the model as a single array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import DataError, FormatError, UsageError

CHECKPOINT_MAGIC = b"EF3DCKPT"
CHECKPOINT_VERSION = 1

_NORM_EPS = 1e-8


@dataclass(frozen=True)
class FieldArch:
    """Architecture descriptor. Defaults are desk-scale; the full-size
    shape (base_width 64, channel_mults (1, 2, 4, 8)) is expressible."""

    in_channels: int = 5
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2)
    kernel_size: int = 3
    time_dim: int = 16
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        if self.in_channels != 5:
            raise UsageError("field expects exactly 5 input channels (x_t, e, i, j, k)")
        if self.base_width < 1 or not self.channel_mults:
            raise UsageError("base_width >= 1 and at least one channel mult required")
        if self.kernel_size % 2 == 0:
            raise UsageError("kernel_size must be odd")
        if self.time_dim < 2 or self.time_dim % 2:
            raise UsageError("time_dim must be even and >= 2")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"dtype must be float32|float64, got {self.dtype}")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "channel_mults": list(self.channel_mults),
            "kernel_size": self.kernel_size,
            "time_dim": self.time_dim,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldArch":
        d = dict(d)
        if "channel_mults" in d:
            d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


@dataclass(frozen=True)
class FieldGradients:
    """Loss gradient aligned entry-for-entry with the flat parameter vector."""

    values: np.ndarray


def _block_param_shapes(name, c_in, c_out, k, tdim):
    return [
        (f"{name}.conv1.w", (c_out, c_in, k, k, k), "conv"),
        (f"{name}.conv1.b", (c_out,), "zero"),
        (f"{name}.norm1.g", (c_out,), "one"),
        (f"{name}.film1.w", (2 * c_out, tdim), "zero"),
        (f"{name}.film1.b", (2 * c_out,), "zero"),
        (f"{name}.conv2.w", (c_out, c_out, k, k, k), "conv"),
        (f"{name}.conv2.b", (c_out,), "zero"),
        (f"{name}.norm2.g", (c_out,), "one"),
        (f"{name}.film2.w", (2 * c_out, tdim), "zero"),
        (f"{name}.film2.b", (2 * c_out,), "zero"),
    ]


def param_spec(arch: FieldArch) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) listing of every parameter."""
    k = arch.kernel_size
    w = arch.widths
    spec = [
        ("time.w", (arch.time_dim, arch.time_dim), "linear"),
        ("time.b", (arch.time_dim,), "zero"),
        ("conv_in.w", (w[0], arch.in_channels, k, k, k), "conv"),
        ("conv_in.b", (w[0],), "zero"),
    ]
    for lvl in range(arch.levels):
        c_in = w[0] if lvl == 0 else 8 * w[lvl - 1]
        spec += _block_param_shapes(f"enc{lvl}", c_in, w[lvl], k, arch.time_dim)
    for lvl in range(arch.levels - 2, -1, -1):
        spec += [
            (f"up{lvl}.w", (w[lvl], w[lvl + 1], k, k, k), "conv"),
            (f"up{lvl}.b", (w[lvl],), "zero"),
        ]
        spec += _block_param_shapes(f"dec{lvl}", 2 * w[lvl], w[lvl], k, arch.time_dim)
    spec += [
        ("conv_out.w", (1, w[0], k, k, k), "zero"),
        ("conv_out.b", (1,), "zero"),
    ]
    return spec


def n_params(arch: FieldArch) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_spec(arch))


def init_params(arch: FieldArch, rng: np.random.Generator) -> np.ndarray:
    """Fan-in-scaled random weights; FiLM and the output layer start at zero."""
    out = np.empty(n_params(arch), dtype=arch.np_dtype)
    offset = 0
    for _name, shape, kind in param_spec(arch):
        size = int(np.prod(shape))
        view = out[offset : offset + size]
        if kind == "zero":
            view[:] = 0.0
        elif kind == "one":
            view[:] = 1.0
        else:  # conv or linear weight: N(0, 1/fan_in)
            fan_in = int(np.prod(shape[1:]))
            view[:] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=size)
        offset += size
    return out


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _silu_grad(g, x, s):
    return g * (s * (1.0 + x * (1.0 - s)))


def _time_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half)).astype(dtype)
    ang = t.astype(dtype)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _space_to_channel(x):
    b, c, d, h, w = x.shape
    v = x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
    return np.ascontiguousarray(
        v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(b, c * 8, d // 2, h // 2, w // 2)
    )


def _space_to_channel_grad(g, c):
    b, _, d, h, w = g.shape
    v = g.reshape(b, c, 2, 2, 2, d, h, w)
    return np.ascontiguousarray(
        v.transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(b, c, d * 2, h * 2, w * 2)
    )


def _upsample_nearest(x):
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4))


def _upsample_nearest_grad(g):
    b, c, d, h, w = g.shape
    return np.ascontiguousarray(
        g.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))
    )


class VelocityField:
    """Trainable velocity model.

    ``theta`` is the flat parameter vector; ``params`` holds named views
    into it. ``forward`` is deterministic given (theta, inputs) and caches
    intermediates so ``backward`` can return exact gradients for the same
    batch. The value is treated as immutable during inference; training
    mutates ``theta`` in place through a single writer.
    """

    def __init__(self, arch: FieldArch, theta: np.ndarray | None = None):
        self.arch = arch
        spec = param_spec(arch)
        total = sum(int(np.prod(s)) for _, s, _ in spec)
        if theta is None:
            theta = np.zeros(total, dtype=arch.np_dtype)
        theta = np.ascontiguousarray(theta, dtype=arch.np_dtype)
        if theta.shape != (total,):
            raise DataError(f"theta must have {total} entries, got {theta.shape}")
        self.theta = theta
        self.params = {}
        offset = 0
        for name, shape, _ in spec:
            size = int(np.prod(shape))
            self.params[name] = self.theta[offset : offset + size].reshape(shape)
            offset += size
        self._spec = spec
        self._cache = None

    @classmethod
    def create(cls, arch: FieldArch, rng: np.random.Generator) -> "VelocityField":
        return cls(arch, init_params(arch, rng))

    @property
    def n_params(self) -> int:
        return self.theta.size

    # ---- forward -----------------------------------------------------

    def _conv(self, name, x, cache):
        x = np.ascontiguousarray(x)
        cache[f"conv:{name}"] = x
        return backend.ops.conv3d_forward(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _stage(self, tag, norm_name, film_name, h, temb, cache):
        """RMS norm -> FiLM(t) -> SiLU, caching what backward needs."""
        g = self.params[f"{norm_name}.g"]
        m = np.mean(h * h, axis=(2, 3, 4), keepdims=True)
        u = 1.0 / np.sqrt(m + _NORM_EPS)
        normed = h * u * g[None, :, None, None, None]

        sb = temb @ self.params[f"{film_name}.w"].T + self.params[f"{film_name}.b"]
        c = h.shape[1]
        scale = sb[:, :c, None, None, None]
        shift = sb[:, c:, None, None, None]
        filmed = normed * (1.0 + scale) + shift

        act, sig = _silu(filmed)
        cache[f"nfs:{tag}"] = (norm_name, film_name, h, u, normed, scale, filmed, sig)
        return act

    def _block(self, name, x, temb, cache):
        h = self._conv(f"{name}.conv1", x, cache)
        h = self._stage(f"{name}.s1", f"{name}.norm1", f"{name}.film1", h, temb, cache)
        h = self._conv(f"{name}.conv2", h, cache)
        h = self._stage(f"{name}.s2", f"{name}.norm2", f"{name}.film2", h, temb, cache)
        return h

    def forward(self, x_t, t, e, coords, keep_cache: bool = True) -> np.ndarray:
        """Predicted velocity for a batch.

        ``x_t`` and ``e`` are (B, 1, X, Y, Z); ``coords`` are three
        (B, X, Y, Z) or (B, 1, X, Y, Z) tensors; ``t`` is scalar or (B,)
        in [0, 1]. Returns (B, 1, X, Y, Z).
        """
        dt = self.arch.np_dtype
        x_t = np.asarray(x_t, dtype=dt)
        e = np.asarray(e, dtype=dt)
        cs = [np.asarray(c, dtype=dt) for c in coords]
        cs = [c[:, None] if c.ndim == 4 else c for c in cs]
        if x_t.ndim != 5 or x_t.shape[1] != 1:
            raise DataError(f"x_t must be (B,1,X,Y,Z), got {x_t.shape}")
        for arr in (e, *cs):
            if arr.shape != x_t.shape:
                raise DataError("all spatial tensors must share the x_t shape")
        t = np.asarray(t, dtype=dt).reshape(-1)
        if t.size == 1:
            t = np.full(x_t.shape[0], t[0], dtype=dt)
        if t.shape[0] != x_t.shape[0]:
            raise DataError("t must be scalar or one value per batch sample")
        if (t < 0).any() or (t > 1).any():
            raise DataError("t must lie in [0, 1]")
        spatial = x_t.shape[2:]
        down = 2 ** (self.arch.levels - 1)
        if any(s % down for s in spatial):
            raise DataError(
                f"spatial dims {spatial} must be divisible by {down} "
                f"for {self.arch.levels} levels"
            )

        cache = {}
        temb0 = _time_embedding(t, self.arch.time_dim, dt)
        pre = temb0 @ self.params["time.w"].T + self.params["time.b"]
        temb, t_sig = _silu(pre)
        cache["time"] = (temb0, pre, t_sig, temb)

        x = np.concatenate([x_t, e, *cs], axis=1)
        h = self._conv("conv_in", x, cache)
        skips = []
        for lvl in range(self.arch.levels):
            h = self._block(f"enc{lvl}", h, temb, cache)
            if lvl < self.arch.levels - 1:
                skips.append(h)
                h = _space_to_channel(h)
        for lvl in range(self.arch.levels - 2, -1, -1):
            h = self._conv(f"up{lvl}", _upsample_nearest(h), cache)
            h = np.concatenate([h, skips[lvl]], axis=1)
            h = self._block(f"dec{lvl}", h, temb, cache)
        out = self._conv("conv_out", h, cache)
        self._cache = cache if keep_cache else None
        return out

    # ---- backward ----------------------------------------------------

    def _conv_back(self, name, g, grads):
        x_in = self._cache[f"conv:{name}"]
        w = self.params[f"{name}.w"]
        g = np.ascontiguousarray(g)
        gw, gb = backend.ops.conv3d_grad_weight(x_in, g, w.shape[2:])
        grads[f"{name}.w"] += gw
        grads[f"{name}.b"] += gb
        return backend.ops.conv3d_grad_input(g, w)

    def _stage_back(self, tag, g, grads, temb, g_temb):
        norm_name, film_name, h, u, normed, scale, filmed, sig = self._cache[f"nfs:{tag}"]
        g = _silu_grad(g, filmed, sig)
        g_scale = (g * normed).sum(axis=(2, 3, 4))
        g_shift = g.sum(axis=(2, 3, 4))
        g_sb = np.concatenate([g_scale, g_shift], axis=1)
        grads[f"{film_name}.w"] += g_sb.T @ temb
        grads[f"{film_name}.b"] += g_sb.sum(axis=0)
        g_temb += g_sb @ self.params[f"{film_name}.w"]
        g = g * (1.0 + scale)

        gvec = self.params[f"{norm_name}.g"]
        grads[f"{norm_name}.g"] += (g * h * u).sum(axis=(0, 2, 3, 4))
        n_spatial = h.shape[2] * h.shape[3] * h.shape[4]
        dot = (g * h).sum(axis=(2, 3, 4), keepdims=True)
        gc = gvec[None, :, None, None, None]
        return gc * u * g - (gc * u**3 / n_spatial) * h * dot

    def _block_back(self, name, g, grads, temb, g_temb):
        g = self._stage_back(f"{name}.s2", g, grads, temb, g_temb)
        g = self._conv_back(f"{name}.conv2", g, grads)
        g = self._stage_back(f"{name}.s1", g, grads, temb, g_temb)
        return self._conv_back(f"{name}.conv1", g, grads)

    def backward(self, loss_grad: np.ndarray) -> FieldGradients:
        """Exact parameter gradients for the last cached forward batch.

        ``loss_grad`` is dL/d(output) with the output's shape; the result
        aligns one-to-one with ``theta``.
        """
        if self._cache is None:
            raise UsageError("backward requires a preceding forward with keep_cache=True")
        dt = self.arch.np_dtype
        grads = {name: np.zeros(shape, dtype=dt) for name, shape, _ in self._spec}
        temb0, pre, t_sig, temb = self._cache["time"]
        g_temb = np.zeros_like(temb)
        widths = self.arch.widths
        levels = self.arch.levels

        g = self._conv_back("conv_out", np.asarray(loss_grad, dtype=dt), grads)

        # Decoder ran lvl = levels-2 .. 0; walk it back upward, collecting
        # the gradient each concat sends into its encoder skip.
        skip_grads = {}
        for lvl in range(levels - 1):
            g = self._block_back(f"dec{lvl}", g, grads, temb, g_temb)
            g_up = g[:, : widths[lvl]]
            skip_grads[lvl] = np.ascontiguousarray(g[:, widths[lvl] :])
            g = _upsample_nearest_grad(self._conv_back(f"up{lvl}", g_up, grads))

        # Encoder, deepest level first; merge skip gradients where the
        # forward pass branched.
        for lvl in range(levels - 1, -1, -1):
            g = self._block_back(f"enc{lvl}", g, grads, temb, g_temb)
            if lvl > 0:
                g = _space_to_channel_grad(g, widths[lvl - 1]) + skip_grads[lvl - 1]
        self._conv_back("conv_in", g, grads)

        g_pre = _silu_grad(g_temb, pre, t_sig)
        grads["time.w"] += g_pre.T @ temb0
        grads["time.b"] += g_pre.sum(axis=0)

        flat = np.empty_like(self.theta)
        offset = 0
        for name, shape, _ in self._spec:
            size = int(np.prod(shape))
            flat[offset : offset + size] = grads[name].ravel()
            offset += size
        return FieldGradients(flat)

    # ---- checkpointing -----------------------------------------------

    def save(self, path) -> None:
        """Versioned binary checkpoint: descriptor JSON + raw parameters."""
        arch_json = json.dumps(self.arch.to_dict(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(CHECKPOINT_VERSION.to_bytes(2, "little"))
            fh.write(len(arch_json).to_bytes(4, "little"))
            fh.write(arch_json)
            fh.write(self.theta.astype("<f8" if self.arch.dtype == "float64" else "<f4").tobytes())

    @staticmethod
    def _read_checkpoint(path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a field checkpoint")
        version = int.from_bytes(blob[8:10], "little")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        n = int.from_bytes(blob[10:14], "little")
        arch = FieldArch.from_dict(json.loads(blob[14 : 14 + n].decode()))
        raw = blob[14 + n :]
        dtype = "<f8" if arch.dtype == "float64" else "<f4"
        theta = np.frombuffer(raw, dtype=dtype)
        if theta.size != n_params(arch):
            raise FormatError(f"{path}: parameter payload does not match descriptor")
        return arch, theta

    @classmethod
    def load(cls, path) -> "VelocityField":
        arch, theta = cls._read_checkpoint(path)
        return cls(arch, theta)

    def load_params(self, path) -> None:
        """Load parameters into this instance; mismatched descriptors are rejected."""
        arch, theta = self._read_checkpoint(path)
        if arch != self.arch:
            raise FormatError(
                f"{path}: checkpoint descriptor {arch} does not match field {self.arch}"
            )
        self.theta[:] = theta
