"""Command-line surface tying the pipeline together.

Subcommands: ``phantom`` (corpus generation), ``edge`` (edge detection),
``train`` (flow training), ``harmonize`` (flow sampling + optional
refinement), ``baseline`` (histogram matching / spectrum swap), ``eval``
(metrics report) and ``bench`` (kernel backend benchmark).

Every command is deterministic given a config and seed, validates its
inputs, writes outputs atomically (temp file + rename) and echoes the
effective configuration and a log into the run directory. Exit codes:
0 success, 2 usage error, 3 data error, 4 convergence error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, backend
from .baselines import build_target_histogram, histogram_match, mean_volume, ssimh
from .config import RunConfig
from .edges import adaptive_edge_detect, save_edge_map
from .errors import DataError, EdgeflowError, UsageError
from .field import VelocityField
from .flow import harmonize, train, write_loss_trace
from .metrics import evaluate_pair
from .phantom import generate_corpus, load_manifest, load_subject_volumes, save_corpus
from .refine import refine
from .volume import Volume3D, load_volume, normalize_percentile, save_volume


def _atomic(path, write_fn) -> None:
    """Write via temp file + rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _RunLog:
    def __init__(self, run_dir: Path):
        self.lines = []
        self.run_dir = run_dir

    def __call__(self, msg: str) -> None:
        print(msg, file=sys.stderr)
        self.lines.append(msg)

    def flush(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "log.txt").write_text("\n".join(self.lines) + "\n")


def _setup(args, out_path) -> tuple[RunConfig, _RunLog]:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    run_dir = Path(out_path if args.run_dir is None else args.run_dir)
    if run_dir.suffix:  # a file path: use its directory
        run_dir = run_dir.parent
    log = _RunLog(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(run_dir / "config.json")
    return cfg, log


def _load_normalized(path, cfg: RunConfig, normalize: bool) -> Volume3D:
    v = load_volume(path)
    if normalize:
        v, _ = normalize_percentile(v, cfg.volume.percentile_lo, cfg.volume.percentile_hi)
    return v


def cmd_phantom(args) -> int:
    cfg, log = _setup(args, args.out)
    p = cfg.phantom
    corpus = generate_corpus(
        p.spec(cfg.seed),
        p.n_subjects,
        p.target_contrast.contrast(),
        {name: c.contrast() for name, c in p.source_contrasts.items()},
        rng=np.random.default_rng(cfg.seed),
        lesion_subjects=tuple(p.lesion_subjects),
        split_fractions=tuple(p.split_fractions),
    )
    save_corpus(corpus, args.out)
    log(f"phantom: wrote {p.n_subjects} subjects to {args.out}")
    log.flush()
    return 0


def cmd_edge(args) -> int:
    cfg, log = _setup(args, args.out)
    v = _load_normalized(args.volume, cfg, args.normalize)
    edge_map = adaptive_edge_detect(v, cfg.edges.canny_config())
    _atomic(args.out, lambda tmp: save_edge_map(edge_map, tmp, v.spacing))
    log(
        f"edge: fraction={edge_map.edge_fraction:.4f} "
        f"threshold={edge_map.threshold_used:.6f} -> {args.out}"
    )
    log.flush()
    return 0


def cmd_train(args) -> int:
    cfg, log = _setup(args, args.out)
    manifest = load_manifest(args.corpus)
    train_idx = manifest["split"]["train"]
    if not train_idx:
        raise DataError(f"{args.corpus}: empty training split")
    canny = cfg.edges.canny_config()
    volumes, edges = [], []
    for idx in train_idx:
        target, _, _ = load_subject_volumes(args.corpus, idx)
        volumes.append(target)
        edges.append(adaptive_edge_detect(target, canny))
    log(f"train: {len(volumes)} target volumes from {args.corpus}")
    field = VelocityField.create(cfg.field.arch(), np.random.default_rng(cfg.seed))
    field, trace = train(
        field,
        volumes,
        edges,
        cfg.flow.train_config(cfg.seed),
        cfg.patches.sampler_config(cfg.seed),
        checkpoint_dir=Path(args.out).parent if cfg.flow.checkpoint_every else None,
    )
    _atomic(args.out, field.save)
    _atomic(str(args.out) + ".loss.csv", lambda tmp: write_loss_trace(trace, tmp))
    log(f"train: final loss {trace[-1][1]:.5f} -> {args.out}")
    log.flush()
    return 0


def cmd_harmonize(args) -> int:
    cfg, log = _setup(args, args.out)
    field = VelocityField.load(args.checkpoint)
    src = _load_normalized(args.source, cfg, args.normalize)
    out = harmonize(
        field,
        src,
        cfg.edges.canny_config(),
        cfg.sampler.sampler_config(cfg.seed),
        tiled=args.tiled,
        max_voxels=args.max_voxels,
    )
    refine_cfg = cfg.refine.refine_config()
    if refine_cfg.metric != "none" and refine_cfg.iterations > 0:
        out = refine(out, src, refine_cfg)
        out = out.with_data(np.clip(out.data, 0.0, 1.0))
        log(f"harmonize: refined with {refine_cfg.metric} x{refine_cfg.iterations}")
    _atomic(args.out, lambda tmp: save_volume(out, tmp))
    log(f"harmonize: {args.source} -> {args.out}")
    log.flush()
    return 0


def cmd_baseline(args) -> int:
    cfg, log = _setup(args, args.out)
    src = _load_normalized(args.source, cfg, args.normalize)
    refs = [load_volume(p) for p in args.target_ref]
    if args.method == "histmatch":
        hist = build_target_histogram(refs, cfg.baselines.histogram_bins)
        out = histogram_match(src, hist)
    else:  # ssimh
        out = ssimh(src, mean_volume(refs), cfg.baselines.ssimh_cutoff)
        out = out.with_data(np.clip(out.data, 0.0, 1.0))
    _atomic(args.out, lambda tmp: save_volume(out, tmp))
    log(f"baseline {args.method}: {args.source} -> {args.out}")
    log.flush()
    return 0


def cmd_eval(args) -> int:
    cfg, log = _setup(args, args.out)
    pred = load_volume(args.pred)
    truth = load_volume(args.truth)
    mask_mode = None if args.no_mask else "threshold"
    report = evaluate_pair(
        pred,
        truth,
        mask=mask_mode,
        mask_frac=cfg.metrics.mask_frac,
        ssim_window=cfg.metrics.ssim_window,
    )
    _atomic(args.out, lambda tmp: Path(tmp).write_text(report.to_json() + "\n"))
    log(f"eval: psnr={report.psnr_db:.2f} ssim={report.ssim:.4f} -> {args.out}")
    log.flush()
    return 0


def cmd_bench(args) -> int:
    from .bench import run_benchmark

    results = run_benchmark(sizes=args.sizes, repeats=args.repeats)
    text = json.dumps(results, indent=2)
    if args.out:
        _atomic(args.out, lambda tmp: Path(tmp).write_text(text + "\n"))
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeflow3d",
        description="Blind 3D volume harmonization via edge-conditioned rectified flow.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--run-dir", default=None, help="directory for config echo and log")
        if needs_out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("phantom", help="generate a synthetic paired corpus")
    common(p)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("edge", help="adaptive edge detection on one volume")
    p.add_argument("volume", help="input volume (raw-v1 or NIfTI-1)")
    p.add_argument("--normalize", action="store_true", help="percentile-normalize first")
    common(p)
    p.set_defaults(fn=cmd_edge)

    p = sub.add_parser("train", help="train the edge-to-image flow on a corpus")
    p.add_argument("corpus", help="corpus directory from `phantom`")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("harmonize", help="harmonize a source volume with a trained model")
    p.add_argument("checkpoint", help="field checkpoint from `train`")
    p.add_argument("source", help="source-domain volume")
    p.add_argument("--normalize", action="store_true", help="percentile-normalize first")
    p.add_argument("--tiled", action="store_true", help="tile inference for large volumes")
    p.add_argument("--max-voxels", type=int, default=2**21)
    common(p)
    p.set_defaults(fn=cmd_harmonize)

    p = sub.add_parser("baseline", help="blind baseline harmonization")
    p.add_argument("method", choices=["histmatch", "ssimh"])
    p.add_argument("source", help="source-domain volume")
    p.add_argument("--target-ref", nargs="+", required=True, help="target-domain volume(s)")
    p.add_argument("--normalize", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("eval", help="PSNR/SSIM report for a harmonized volume")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--no-mask", action="store_true", help="evaluate the whole volume")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="compare compiled vs python kernel backends")
    p.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(fn=cmd_bench, config=None, seed=None, run_dir=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EdgeflowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
