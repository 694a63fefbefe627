"""Synthetic traveling-subject phantoms.

Each subject is one shared anatomical structure (smooth random shapes
over a background, plus fine texture) rendered under per-domain contrast
functions: a strictly monotone intensity map, an optional smooth
multiplicative bias field and additive noise. Domains therefore differ
in contrast while sharing structure exactly, which is precisely the
regime the harmonization pipeline assumes, and the clean structure and
label volume provide ground truth for every end-to-end test.

Design notes: shapes are painted in order (later shapes overwrite
earlier ones, so overlaps resolve to a single label); texture keeps the
gradient distribution rich enough for fraction-targeted edge detection;
an optional hyperintense "lesion" blob (painted last, recorded as its
own label) supports hallucination-suppression experiments where the
training corpus has never seen such a feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, FormatError, UsageError
from .volume import Volume3D, load_volume, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_shapes: int = 8
    tissue_levels: tuple[float, ...] | None = None  # per shape, background excluded
    texture_amp: float = 0.025
    texture_sigma: float = 2.0
    smooth_sigma: float = 0.7
    lesion: bool = False
    lesion_radius: float = 2.5
    lesion_level: float = 0.95
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_shapes < 1:
            raise UsageError("n_shapes must be >= 1")
        if self.tissue_levels is not None:
            if len(self.tissue_levels) != self.n_shapes:
                raise UsageError("tissue_levels must list one intensity per shape")
            if any(not 0.0 < v < 1.0 for v in self.tissue_levels):
                raise UsageError("tissue_levels must lie in (0, 1)")


@dataclass(frozen=True)
class ContrastFunction:
    """Strictly monotone intensity map + smooth bias field + noise level."""

    points: tuple[tuple[float, float], ...]
    bias_amp: float = 0.0
    bias_coeffs: tuple[float, ...] = (0.0,) * 9
    noise_sigma: float = 0.0

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bias_coeffs", tuple(float(c) for c in self.bias_coeffs))
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        if len(pts) < 2 or xs[0] != 0.0 or xs[-1] != 1.0:
            raise UsageError("contrast points must span x = 0 .. 1")
        if any(b <= a for a, b in zip(xs, xs[1:])) or any(b <= a for a, b in zip(ys, ys[1:])):
            raise UsageError("contrast points must be strictly increasing in x and y")
        if ys[0] < 0.0 or ys[-1] > 1.0:
            raise UsageError("contrast values must stay inside [0, 1]")
        if len(self.bias_coeffs) != 9:
            raise UsageError("bias_coeffs must have 9 entries (degree-2 monomials)")
        if self.bias_amp < 0 or self.noise_sigma < 0:
            raise UsageError("bias_amp and noise_sigma must be >= 0")

    @classmethod
    def identity(cls) -> "ContrastFunction":
        return cls(points=((0.0, 0.0), (1.0, 1.0)))

    def apply_map(self, values: np.ndarray) -> np.ndarray:
        xs = np.array([p[0] for p in self.points])
        ys = np.array([p[1] for p in self.points])
        return np.interp(values, xs, ys)

    def bias_field(self, dims: tuple[int, int, int]) -> np.ndarray:
        """exp of a zero-mean degree-2 polynomial scaled to std bias_amp."""
        if self.bias_amp == 0.0:
            return np.ones(dims)
        axes = [np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(d) for d in dims]
        u = axes[0][:, None, None]
        v = axes[1][None, :, None]
        w = axes[2][None, None, :]
        c = self.bias_coeffs
        g = (
            c[0] * u + c[1] * v + c[2] * w
            + c[3] * u * u + c[4] * v * v + c[5] * w * w
            + c[6] * u * v + c[7] * u * w + c[8] * v * w
        )
        g = g - g.mean()
        std = g.std()
        if std == 0.0:
            return np.ones(dims)
        return np.exp(g * (self.bias_amp / std))


@dataclass(frozen=True)
class PhantomStructure:
    """Shared per-subject anatomy: labels plus the clean intensity render."""

    labels: np.ndarray  # int16, 0 = background, 1..n_shapes (+ lesion label)
    clean: Volume3D
    tissue_levels: tuple[float, ...]
    lesion_label: int | None = None

    def piecewise_intensity(self) -> np.ndarray:
        """Pre-smoothing intensity: tissue level lookup per label."""
        lut = np.zeros(self.labels.max() + 1)
        for lbl, level in enumerate(self.tissue_levels, start=1):
            lut[lbl] = level
        return lut[self.labels]


def _rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _grid(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def _ellipsoid_mask(dims, center, semi_axes, rot, wobble=None, wobble_amp=0.0):
    xx, yy, zz = _grid(dims)
    p = np.stack([xx - center[0], yy - center[1], zz - center[2]])
    local = np.einsum("ab,bxyz->axyz", rot.T, p)
    q = sum((local[a] / semi_axes[a]) ** 2 for a in range(3))
    if wobble is not None and wobble_amp > 0:
        q = q + wobble_amp * wobble
    return q < 1.0


def generate_structure(spec: PhantomSpec, rng: np.random.Generator | None = None) -> PhantomStructure:
    """One subject's structure: head shape, inner shapes, optional lesion.

    Shapes are painted in order so overlaps resolve to the most recently
    painted label. Label boundaries coincide voxel-exactly with the
    discontinuities of the piecewise-constant intensity.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
    dims = spec.dims
    nd = np.array(dims, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.int16)

    head_center = nd / 2 + rng.uniform(-0.02, 0.02, 3) * nd
    head_axes = rng.uniform(0.40, 0.46, 3) * nd
    head_rot = _rotation_matrix(rng)
    labels[_ellipsoid_mask(dims, head_center, head_axes, head_rot)] = 1

    wobble_base = gaussian_filter(rng.standard_normal(dims), max(min(dims) / 10.0, 2.0))
    wobble_base /= max(wobble_base.std(), 1e-9)

    for shape_idx in range(2, spec.n_shapes + 1):
        center = head_center + rng.uniform(-0.55, 0.55, 3) * head_axes
        axes = rng.uniform(0.12, 0.26, 3) * nd
        rot = _rotation_matrix(rng)
        wobble_amp = rng.uniform(0.1, 0.45)
        mask = _ellipsoid_mask(dims, center, axes, rot, wobble_base, wobble_amp)
        labels[mask & (labels >= 1)] = shape_idx  # inner shapes stay inside the head

    if spec.tissue_levels is not None:
        levels = list(spec.tissue_levels)
    else:
        levels = [0.4] + list(rng.permutation(np.linspace(0.15, 0.9, spec.n_shapes - 1)))

    lesion_label = None
    if spec.lesion:
        lesion_label = spec.n_shapes + 1
        center = head_center + rng.uniform(-0.45, 0.45, 3) * head_axes
        r = spec.lesion_radius
        mask = _ellipsoid_mask(dims, center, (r, r, r), np.eye(3))
        labels[mask & (labels >= 1)] = lesion_label
        levels.append(spec.lesion_level)

    levels = tuple(float(v) for v in levels)
    lut = np.zeros(len(levels) + 1)
    lut[1:] = levels
    clean = lut[labels]
    if spec.texture_amp > 0:
        # Texture is part of the shared structure (common across domains);
        # the faint background component keeps the gradient-candidate pool
        # large enough for fraction-targeted edge detection.
        texture = gaussian_filter(rng.standard_normal(dims), spec.texture_sigma)
        texture /= max(texture.std(), 1e-9)
        inside = labels > 0
        clean = clean + spec.texture_amp * texture * np.where(inside, 1.0, 0.4)
        clean = np.abs(clean)
    if spec.smooth_sigma > 0:
        clean = gaussian_filter(clean, spec.smooth_sigma)
    clean = np.clip(clean, 0.0, 1.0)
    return PhantomStructure(
        labels, Volume3D(dims, spec.spacing, clean), levels, lesion_label
    )


def render_domain(
    structure: PhantomStructure, contrast: ContrastFunction, rng: np.random.Generator
) -> Volume3D:
    """Render the structure under one acquisition domain's contrast.

    Monotone map, then multiplicative bias, then additive noise; the
    result is clamped back into [0, 1] (exact identity when the contrast
    is the identity with no bias or noise).
    """
    clean = structure.clean
    x = contrast.apply_map(clean.data.astype(np.float64))
    if contrast.bias_amp > 0:
        x = x * contrast.bias_field(clean.dims)
    if contrast.noise_sigma > 0:
        x = x + rng.normal(0.0, contrast.noise_sigma, clean.dims)
    return clean.with_data(np.clip(x, 0.0, 1.0))


@dataclass(frozen=True)
class PhantomSubject:
    index: int
    structure: PhantomStructure
    target: Volume3D
    sources: dict[str, Volume3D]


@dataclass(frozen=True)
class PhantomCorpus:
    subjects: list[PhantomSubject]
    split: dict[str, list[int]]
    source_names: tuple[str, ...]
    spec: PhantomSpec


def generate_corpus(
    spec: PhantomSpec,
    n_subjects: int,
    c_target: ContrastFunction,
    c_sources: dict[str, ContrastFunction],
    rng: np.random.Generator | None = None,
    lesion_subjects: tuple[int, ...] = (),
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> PhantomCorpus:
    """Paired dataset: per subject one structure, one target render and one
    render per source contrast, plus train/val/test split indices.

    Subjects get independent child generators spawned from one parent, so
    the corpus is reproducible from a single seed.
    """
    if n_subjects < 1:
        raise UsageError("n_subjects must be >= 1")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise UsageError("split fractions must sum to 1")
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
    children = rng.spawn(n_subjects)
    subjects = []
    for i in range(n_subjects):
        sub_spec = PhantomSpec(
            dims=spec.dims,
            spacing=spec.spacing,
            n_shapes=spec.n_shapes,
            tissue_levels=spec.tissue_levels,
            texture_amp=spec.texture_amp,
            texture_sigma=spec.texture_sigma,
            smooth_sigma=spec.smooth_sigma,
            lesion=i in lesion_subjects,
            lesion_radius=spec.lesion_radius,
            lesion_level=spec.lesion_level,
            rng_seed=spec.rng_seed,
        )
        child = children[i]
        structure = generate_structure(sub_spec, child)
        target = render_domain(structure, c_target, child)
        sources = {name: render_domain(structure, c, child) for name, c in c_sources.items()}
        subjects.append(PhantomSubject(i, structure, target, sources))

    n_train = int(round(split_fractions[0] * n_subjects))
    n_val = int(round(split_fractions[1] * n_subjects))
    n_train = min(n_train, n_subjects)
    n_val = min(n_val, n_subjects - n_train)
    split = {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n_subjects)),
    }
    return PhantomCorpus(subjects, split, tuple(c_sources.keys()), spec)


def save_corpus(corpus: PhantomCorpus, out_dir) -> None:
    """Directory layout: manifest.json + sub-XXX/{target,labels,src-*}.hvol."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "n_subjects": len(corpus.subjects),
        "dims": list(corpus.spec.dims),
        "spacing": list(corpus.spec.spacing),
        "source_names": list(corpus.source_names),
        "split": corpus.split,
        "lesion_labels": {
            str(s.index): s.structure.lesion_label
            for s in corpus.subjects
            if s.structure.lesion_label is not None
        },
    }
    for s in corpus.subjects:
        sub_dir = out / f"sub-{s.index:03d}"
        sub_dir.mkdir(exist_ok=True)
        save_volume(s.target, sub_dir / "target.hvol")
        labels_vol = Volume3D(
            s.target.dims, s.target.spacing, s.structure.labels.astype(np.float32)
        )
        save_volume(labels_vol, sub_dir / "labels.hvol")
        for name, vol in s.sources.items():
            save_volume(vol, sub_dir / f"src-{name}.hvol")
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out / "manifest.json")


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{corpus_dir}: missing manifest.json")
    return json.loads(path.read_text())


def load_subject_volumes(corpus_dir, index: int) -> tuple[Volume3D, np.ndarray, dict[str, Volume3D]]:
    """(target, labels, sources) for one on-disk subject."""
    sub_dir = Path(corpus_dir) / f"sub-{index:03d}"
    if not sub_dir.is_dir():
        raise DataError(f"{corpus_dir}: no subject {index}")
    target = load_volume(sub_dir / "target.hvol")
    labels = load_volume(sub_dir / "labels.hvol").data.astype(np.int16)
    sources = {}
    for f in sorted(sub_dir.glob("src-*.hvol")):
        sources[f.stem[len("src-") :]] = load_volume(f)
    return target, labels, sources
