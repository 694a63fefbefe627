"""Run configuration: one JSON document with per-module sections.

Unknown keys are rejected (typos should fail loudly), every field has a
documented default, and the effective (defaults-resolved) configuration
is echoed into the run directory so any run can be reproduced from its
own artifacts. Flag values override file values, which override
defaults.

The top-level ``seed`` drives every stochastic stage; per-stage
generators are derived from it at fixed offsets (phantom +0, patches +1,
training noise +2, sampler x0 +3) unless a section pins its own seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .edges import CannyConfig
from .errors import UsageError
from .field import FieldArch
from .flow import FlowTrainConfig, SamplerConfig
from .patches import PatchSamplerConfig
from .phantom import ContrastFunction, PhantomSpec
from .refine import RefineConfig

SEED_PHANTOM = 0
SEED_PATCHES = 1
SEED_TRAIN = 2
SEED_SAMPLER = 3


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise UsageError(f"config section {path!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise UsageError(f"unknown config key(s) in {path!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise UsageError(f"bad config section {path!r}: {exc}") from exc


@dataclass(frozen=True)
class VolumeOptions:
    """Percentiles used when a command is asked to normalize its input."""

    percentile_lo: float = 1.0
    percentile_hi: float = 99.0


@dataclass(frozen=True)
class EdgeOptions:
    smoothing_sigma: float = 1.0
    low_high_ratio: float = 0.4
    target_fraction: float = 0.08
    decrement_step: float | None = None
    max_iterations: int = 256

    def canny_config(self) -> CannyConfig:
        return CannyConfig(
            smoothing_sigma=self.smoothing_sigma,
            low_high_ratio=self.low_high_ratio,
            target_fraction=self.target_fraction,
            decrement_step=self.decrement_step,
            max_iterations=self.max_iterations,
        )


@dataclass(frozen=True)
class PatchOptions:
    patch_size: int = 64
    multistride_ratio: float = 0.2
    max_multiple: int | None = None
    random_flip: bool = True
    rng_seed: int | None = None  # None: derive from the top-level seed

    def sampler_config(self, seed: int) -> PatchSamplerConfig:
        return PatchSamplerConfig(
            patch_size=self.patch_size,
            multistride_ratio=self.multistride_ratio,
            max_multiple=self.max_multiple,
            random_flip=self.random_flip,
            rng_seed=self.rng_seed if self.rng_seed is not None else seed + SEED_PATCHES,
        )


@dataclass(frozen=True)
class FieldOptions:
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2)
    kernel_size: int = 3
    time_dim: int = 16
    dtype: str = "float32"

    def arch(self) -> FieldArch:
        return FieldArch(
            base_width=self.base_width,
            channel_mults=tuple(self.channel_mults),
            kernel_size=self.kernel_size,
            time_dim=self.time_dim,
            dtype=self.dtype,
        )


@dataclass(frozen=True)
class FlowOptions:
    learning_rate: float = 5e-5
    batch_size: int = 8
    steps: int = 2000
    checkpoint_every: int = 0
    rng_seed: int | None = None

    def train_config(self, seed: int) -> FlowTrainConfig:
        return FlowTrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            checkpoint_every=self.checkpoint_every,
            rng_seed=self.rng_seed if self.rng_seed is not None else seed + SEED_TRAIN,
        )


@dataclass(frozen=True)
class SamplerOptions:
    n_steps: int = 16
    solver: str = "midpoint"
    abs_tol: float = 5e-5
    rel_tol: float = 5e-5
    rng_seed: int | None = None

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(
            n_steps=self.n_steps,
            solver=self.solver,
            abs_tol=self.abs_tol,
            rel_tol=self.rel_tol,
            rng_seed=self.rng_seed if self.rng_seed is not None else seed + SEED_SAMPLER,
        )


@dataclass(frozen=True)
class RefineOptions:
    metric: str = "ncc"
    step_size: float = 0.02
    iterations: int = 6
    mi_bins: int = 256
    mi_sigma: float = 0.01
    grad_normalize: str = "auto"

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            metric=self.metric,
            step_size=self.step_size,
            iterations=self.iterations,
            mi_bins=self.mi_bins,
            mi_sigma=self.mi_sigma,
            grad_normalize=self.grad_normalize,
        )


@dataclass(frozen=True)
class BaselineOptions:
    histogram_bins: int = 1024
    ssimh_cutoff: float = 0.05


@dataclass(frozen=True)
class MetricsOptions:
    mask_frac: float = 0.05
    ssim_window: int = 7


@dataclass(frozen=True)
class ContrastOptions:
    points: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 1.0))
    bias_amp: float = 0.0
    bias_coeffs: tuple[float, ...] = (0.0,) * 9
    noise_sigma: float = 0.0

    def contrast(self) -> ContrastFunction:
        return ContrastFunction(
            points=tuple((float(x), float(y)) for x, y in self.points),
            bias_amp=self.bias_amp,
            bias_coeffs=tuple(self.bias_coeffs),
            noise_sigma=self.noise_sigma,
        )


_DEFAULT_TARGET = ContrastOptions(points=((0.0, 0.0), (0.5, 0.52), (1.0, 0.98)), noise_sigma=0.01)
_DEFAULT_SOURCES = {
    "strong": ContrastOptions(
        points=((0.0, 0.06), (0.15, 0.45), (0.4, 0.62), (0.7, 0.8), (1.0, 0.97)),
        bias_amp=0.06,
        bias_coeffs=(-0.5, 0.7, 0.2, -0.3, 0.4, -0.6, 0.2, 0.5, -0.4),
        noise_sigma=0.01,
    ),
    "mild": ContrastOptions(points=((0.0, 0.03), (0.5, 0.42), (1.0, 0.9)), noise_sigma=0.01),
}


@dataclass(frozen=True)
class PhantomOptions:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_subjects: int = 10
    n_shapes: int = 12
    texture_amp: float = 0.04
    texture_sigma: float = 2.0
    smooth_sigma: float = 0.6
    lesion_subjects: tuple[int, ...] = ()
    lesion_radius: float = 2.5
    lesion_level: float = 0.95
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    target_contrast: ContrastOptions = _DEFAULT_TARGET
    source_contrasts: dict[str, ContrastOptions] = dc_field(
        default_factory=lambda: dict(_DEFAULT_SOURCES)
    )

    def spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(
            dims=tuple(self.dims),
            spacing=tuple(self.spacing),
            n_shapes=self.n_shapes,
            texture_amp=self.texture_amp,
            texture_sigma=self.texture_sigma,
            smooth_sigma=self.smooth_sigma,
            lesion_radius=self.lesion_radius,
            lesion_level=self.lesion_level,
            rng_seed=seed + SEED_PHANTOM,
        )


_SECTIONS = {
    "volume": VolumeOptions,
    "edges": EdgeOptions,
    "patches": PatchOptions,
    "field": FieldOptions,
    "flow": FlowOptions,
    "sampler": SamplerOptions,
    "refine": RefineOptions,
    "baselines": BaselineOptions,
    "metrics": MetricsOptions,
    "phantom": PhantomOptions,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    volume: VolumeOptions = VolumeOptions()
    edges: EdgeOptions = EdgeOptions()
    patches: PatchOptions = PatchOptions()
    field: FieldOptions = FieldOptions()
    flow: FlowOptions = FlowOptions()
    sampler: SamplerOptions = SamplerOptions()
    refine: RefineOptions = RefineOptions()
    baselines: BaselineOptions = BaselineOptions()
    metrics: MetricsOptions = MetricsOptions()
    phantom: PhantomOptions = PhantomOptions()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise UsageError("config root must be a JSON object")
        unknown = set(data) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise UsageError(f"unknown top-level config key(s): {sorted(unknown)}")
        kwargs = {"seed": int(data.get("seed", 0))}
        for name, section_cls in _SECTIONS.items():
            if name not in data:
                continue
            section = dict(data[name])
            if name == "phantom":
                if "target_contrast" in section:
                    section["target_contrast"] = _parse_contrast(
                        section["target_contrast"], "phantom.target_contrast"
                    )
                if "source_contrasts" in section:
                    section["source_contrasts"] = {
                        key: _parse_contrast(val, f"phantom.source_contrasts.{key}")
                        for key, val in section["source_contrasts"].items()
                    }
            kwargs[name] = _coerce_tuples(_from_dict(section_cls, section, name))
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, dict):
                return {k: convert(v) for k, v in obj.items()}
            if isinstance(obj, tuple):
                return [convert(v) for v in obj]
            return obj

        return convert(self)

    def echo(self, path) -> None:
        """Write the effective configuration next to the run's outputs."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _parse_contrast(data: dict, path: str) -> ContrastOptions:
    section = dict(data)
    if "points" in section:
        section["points"] = tuple(tuple(p) for p in section["points"])
    if "bias_coeffs" in section:
        section["bias_coeffs"] = tuple(section["bias_coeffs"])
    return _from_dict(ContrastOptions, section, path)


def _coerce_tuples(obj):
    """JSON arrays arrive as lists; dataclass fields expect tuples."""
    updates = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, list):
            updates[f.name] = tuple(tuple(v) if isinstance(v, list) else v for v in val)
    return dataclasses.replace(obj, **updates) if updates else obj
