"""Rectified-flow training, ODE sampling and full-volume harmonization.

Training connects Gaussian noise ``x0`` and an image patch ``x1`` on the
straight trajectory ``x_t = t*x1 + (1-t)*x0`` and regresses the field
onto the constant velocity ``x1 - x0`` of that trajectory, conditioned on
the patch's edge and coordinate channels. Sampling integrates
``dx/dt = v(x, t)`` from t=0 (noise) to t=1 with a fixed-step midpoint
(or Euler) scheme. Harmonization runs edge detection on a source volume
and samples the trained field once over the whole volume, so there are
no patch seams at inference time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .edges import CannyConfig, EdgeMap, adaptive_edge_detect
from .errors import CapacityError, ConvergenceError, DataError, UsageError
from .field import FieldGradients, VelocityField
from .patches import PatchSamplerConfig, TrainingPatch, coord_channels, sample_batch
from .volume import Volume3D


@dataclass(frozen=True)
class FlowTrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 8
    steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise UsageError("steps and batch_size must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 16
    solver: str = "midpoint"
    # Error tolerances recorded for a future adaptive solver; the fixed-step
    # schemes here do not consume them.
    abs_tol: float = 5e-5
    rel_tol: float = 5e-5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise UsageError("n_steps must be >= 1")
        if self.solver not in ("midpoint", "euler"):
            raise UsageError(f"solver must be midpoint|euler, got {self.solver}")


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Convex combination t*x1 + (1-t)*x0; t scalar or one value per sample."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise DataError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=x1.dtype)
    if t.ndim > 0:
        t = t.reshape((-1,) + (1,) * (x1.ndim - 1))
    return t * x1 + (1.0 - t) * x0


def _stack_patches(patches: list[TrainingPatch], dtype):
    x1 = np.stack([p.data for p in patches]).astype(dtype)[:, None]
    e = np.stack([p.edge for p in patches]).astype(dtype)[:, None]
    coords = tuple(
        np.stack([p.coords[a] for p in patches]).astype(dtype)[:, None] for a in range(3)
    )
    return x1, e, coords


def _loss_and_grads(field: VelocityField, x1, e, coords, rng) -> tuple[float, FieldGradients]:
    """Velocity-matching squared error plus its exact parameter gradients.

    Draw order is fixed (x0 first, then one t per sample) so a seeded rng
    reproduces the loss sequence exactly.
    """
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    t = rng.uniform(0.0, 1.0, x1.shape[0])
    x_t = interpolate(x0, x1, t)
    target = x1 - x0
    pred = field.forward(x_t, t, e, coords)
    resid = pred - target
    loss = float(np.mean(resid * resid))
    grads = field.backward(2.0 * resid / resid.size)
    return loss, grads


def rectified_loss(
    field: VelocityField, patch: TrainingPatch, rng: np.random.Generator
) -> tuple[float, FieldGradients]:
    """Single-patch training loss: mean squared error between the field's
    prediction at a random (x0, t) and the trajectory velocity x1 - x0."""
    dtype = field.arch.np_dtype
    x1, e, coords = _stack_patches([patch], dtype)
    return _loss_and_grads(field, x1, e, coords, rng)


class _Adam:
    """Standard Adam with bias correction, acting on the flat vector."""

    def __init__(self, n: int, cfg: FlowTrainConfig, dtype):
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.t = 0
        self.cfg = cfg

    def update(self, theta: np.ndarray, grad: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        self.m += (1.0 - c.adam_beta1) * (grad - self.m)
        self.v += (1.0 - c.adam_beta2) * (grad * grad - self.v)
        mhat = self.m / (1.0 - c.adam_beta1**self.t)
        vhat = self.v / (1.0 - c.adam_beta2**self.t)
        theta -= c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps)


def train(
    field: VelocityField,
    volumes: list[Volume3D],
    edges: list[EdgeMap],
    cfg: FlowTrainConfig,
    sampler: PatchSamplerConfig,
    checkpoint_dir=None,
) -> tuple[VelocityField, list[tuple[int, float]]]:
    """Adam-optimize the field on patches drawn from target-domain volumes.

    Returns the trained field (mutated in place) and the loss trace as
    (step, loss) pairs. With ``checkpoint_every`` set and a directory
    given, periodic checkpoints land there as ``step_XXXXXX.ckpt``.
    """
    if not volumes:
        raise DataError("need at least one training volume")
    rng_updates = np.random.default_rng(cfg.rng_seed)
    rng_patches = np.random.default_rng(sampler.rng_seed)
    adam = _Adam(field.n_params, cfg, field.arch.np_dtype)
    dtype = field.arch.np_dtype
    trace = []
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(volumes, edges, sampler, rng_patches, cfg.batch_size)
        x1, e, coords = _stack_patches(batch, dtype)
        loss, grads = _loss_and_grads(field, x1, e, coords, rng_updates)
        if not np.isfinite(loss):
            raise ConvergenceError(f"non-finite loss at step {step}", achieved=loss)
        adam.update(field.theta, grads.values)
        trace.append((step, loss))
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            field.save(Path(checkpoint_dir) / f"step_{step:06d}.ckpt")
    return field, trace


def write_loss_trace(trace: list[tuple[int, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(trace)


def sample(
    field: VelocityField,
    e: np.ndarray,
    coords: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: SamplerConfig,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Integrate dx/dt = v(x, t) from noise at t=0 to an image at t=1.

    ``e`` is a (X, Y, Z) edge tensor and ``coords`` matching coordinate
    channels; ``x0`` overrides the seeded standard-normal draw. Fixed-step
    midpoint by default (Euler available); returns the (X, Y, Z) state at
    t=1.
    """
    e = np.asarray(e, dtype=field.arch.np_dtype)
    if e.ndim != 3:
        raise DataError(f"edge tensor must be 3D, got {e.shape}")
    shape = (1, 1, *e.shape)
    eb = e.reshape(shape)
    cb = tuple(np.asarray(c).reshape(shape) for c in coords)
    if x0 is None:
        rng = np.random.default_rng(cfg.rng_seed)
        x = rng.standard_normal(shape).astype(field.arch.np_dtype)
    else:
        x = np.asarray(x0, dtype=field.arch.np_dtype).reshape(shape).copy()

    dt = 1.0 / cfg.n_steps
    for i in range(cfg.n_steps):
        t = i * dt
        v1 = field.forward(x, t, eb, cb, keep_cache=False)
        if cfg.solver == "euler":
            x = x + dt * v1
        else:
            x_mid = x + (0.5 * dt) * v1
            v2 = field.forward(x_mid, t + 0.5 * dt, eb, cb, keep_cache=False)
            x = x + dt * v2
        if not np.isfinite(x).all():
            raise ConvergenceError(f"non-finite state at integration step {i + 1}")
    return x.reshape(e.shape)


def _tiles_1d(dim: int, tile: int, step: int):
    starts = list(range(0, max(dim - tile, 0) + 1, step))
    if starts[-1] + tile < dim:
        starts.append(dim - tile)
    return starts


def harmonize(
    field: VelocityField,
    x_src: Volume3D,
    canny: CannyConfig,
    sampler: SamplerConfig,
    *,
    tiled: bool = False,
    tile_size: int = 64,
    max_voxels: int = 2**21,
) -> Volume3D:
    """Edge-detect a normalized source volume and regenerate it with the
    trained field, producing a target-contrast volume.

    Inference is full-size by default (one sampling run over the whole
    volume, coordinates spanning [-1, 1], no patch seams); volumes larger
    than ``max_voxels`` raise a capacity error unless ``tiled`` is set, in
    which case overlapping coordinate-correct tiles are integrated
    independently (sharing one noise draw) and averaged.
    """
    data = x_src.data
    if data.min() < -1e-6 or data.max() > 1.0 + 1e-6:
        raise DataError("source volume must be normalized to [0, 1] before harmonizing")
    edge_map = adaptive_edge_detect(x_src, canny)
    dims = x_src.dims
    if not tiled:
        if x_src.n_voxels > max_voxels:
            raise CapacityError(
                f"volume with {x_src.n_voxels} voxels exceeds max_voxels={max_voxels}; "
                "rerun with tiled=True or raise the limit"
            )
        coords = coord_channels(dims, (0, 0, 0), (1, 1, 1), dims)
        out = sample(field, edge_map.as_float(field.arch.np_dtype), coords, cfg=sampler)
    else:
        out = _sample_tiled(field, edge_map, dims, sampler, tile_size)
    return x_src.with_data(np.clip(out, 0.0, 1.0))


def _sample_tiled(field, edge_map, dims, sampler, tile_size):
    tile = tuple(min(tile_size, d) for d in dims)
    down = 2 ** (field.arch.levels - 1)
    if any(t % down for t in tile):
        raise DataError(f"tile size {tile} must be divisible by {down}")
    rng = np.random.default_rng(sampler.rng_seed)
    x0_full = rng.standard_normal(dims)
    acc = np.zeros(dims, dtype=np.float64)
    weight = np.zeros(dims, dtype=np.float64)
    e_float = edge_map.as_float(field.arch.np_dtype)
    for ox in _tiles_1d(dims[0], tile[0], max(tile[0] // 2, 1)):
        for oy in _tiles_1d(dims[1], tile[1], max(tile[1] // 2, 1)):
            for oz in _tiles_1d(dims[2], tile[2], max(tile[2] // 2, 1)):
                sl = (
                    slice(ox, ox + tile[0]),
                    slice(oy, oy + tile[1]),
                    slice(oz, oz + tile[2]),
                )
                coords = coord_channels(dims, (ox, oy, oz), (1, 1, 1), tile)
                piece = sample(field, e_float[sl], coords, sampler, x0=x0_full[sl])
                acc[sl] += piece
                weight[sl] += 1.0
    return acc / weight
