"""``octlesion`` command line: phantom, split, run, matrix, report, fetch-weights.

Exit codes: 0 success, 2 usage or config error, 3 dataset or split error,
4 pretrained weights unavailable, 5 training diverged, 6 output directory
holds a different run, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, load_matrix
from .dataset import LesionLabel, ManifestError, load_manifest
from .evaluator import HUMAN_RATER, MetricsReport, render_report, write_report
from .models import (
    CHECKPOINT_ENV,
    CHECKPOINTS,
    BackboneId,
    CheckpointUnavailable,
    checkpoint_dir,
    fetch_checkpoint,
    write_surrogate_checkpoint,
)
from .phantom import PhantomParams, generate_dataset
from .runner import ConfigMismatch, load_report, run, run_matrix
from .splits import SplitError, make_splits, save_plan, verify_plan
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_WEIGHTS = 4
EXIT_DIVERGED = 5
EXIT_MISMATCH = 6

_ERRORS = (
    (ConfigError, EXIT_CONFIG, "config error"),
    (ManifestError, EXIT_DATA, "manifest error"),
    (SplitError, EXIT_DATA, "split error"),
    (CheckpointUnavailable, EXIT_WEIGHTS, "pretrained weights unavailable"),
    (TrainingDiverged, EXIT_DIVERGED, "training diverged"),
    (ConfigMismatch, EXIT_MISMATCH, "run directory mismatch"),
    (FileNotFoundError, EXIT_DATA, "file not found"),
    (PermissionError, EXIT_DATA, "permission denied"),
)


def cmd_phantom(args) -> int:
    params = PhantomParams(
        image_height_px=args.height,
        image_width_px=args.width,
        bm_brightness=args.bm_brightness,
        bm_disruption=args.bm_disruption,
        hyperkeratosis_prob=args.hk_prob,
        speckle_scale=args.speckle_scale,
        images_per_lesion=args.images_per_lesion,
        seed=args.seed,
    )
    try:
        params.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest = generate_dataset(params, args.benign, args.invasive, args.out)
    counts = manifest.counts
    print(Path(args.out) / "manifest.csv")
    print(
        f"{len(manifest.lesions)} lesions ({counts[LesionLabel.BENIGN]} benign, "
        f"{counts[LesionLabel.INVASIVE]} invasive), {manifest.n_images()} images"
    )
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    plan = make_splits(manifest, LesionLabel(args.rare), args.val_common, args.seed, args.folds)
    problems = verify_plan(plan, manifest)
    if problems:
        raise SplitError("; ".join(problems))
    out = Path(args.out) if args.out else Path(args.manifest).parent / "split_plan.json"
    save_plan(plan, out)
    print(out)
    print(f"{len(plan)} folds, reserved {args.rare}: {', '.join(plan.reserved_rare) or 'none'}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg = cfg.with_output(Path(args.output_dir).resolve())
    report = run(cfg, jobs=args.jobs)
    print(render_report([report]), end="")
    print(f"results in {cfg.output}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    matrix = load_matrix(args.config)
    outcomes = run_matrix(matrix)
    refs = [HUMAN_RATER] if matrix.human_reference else []
    print(render_report([o.report for o in outcomes], refs), end="")
    failed = [o for o in outcomes if o.report.meta.get("failed")]
    for o in failed:
        print(f"failed: {o.report.label}: {o.report.meta.get('error')}", file=sys.stderr)
    return EXIT_INTERNAL if failed else EXIT_OK


def cmd_report(args) -> int:
    reports: list[MetricsReport] = [load_report(p) for p in args.runs]
    refs = [HUMAN_RATER] if args.human else []
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        table = write_report(reports, args.out, refs, f1=args.f1)
    else:
        table = render_report(reports, refs, f1=args.f1)
    print(table, end="")
    return EXIT_OK


def cmd_fetch_weights(args) -> int:
    backbones = [BackboneId(b) for b in args.backbone] or list(BackboneId)
    target = Path(args.dir) if args.dir else checkpoint_dir() / "surrogate"
    for b in backbones:
        if args.surrogate:
            path = write_surrogate_checkpoint(b, target / CHECKPOINTS[b].filename)
        else:
            path = fetch_checkpoint(b, progress=not args.quiet)
        print(path)
    if args.surrogate:
        print(f"set {CHECKPOINT_ENV}={target} to use these weights")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octlesion", description="OCT lesion classification experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate a synthetic layered-tissue dataset")
    d = PhantomParams()
    ph.add_argument("--benign", type=int, default=91)
    ph.add_argument("--invasive", type=int, default=9)
    ph.add_argument("--images-per-lesion", type=int, default=d.images_per_lesion)
    ph.add_argument("--height", type=int, default=d.image_height_px)
    ph.add_argument("--width", type=int, default=d.image_width_px)
    ph.add_argument("--bm-brightness", type=float, default=d.bm_brightness)
    ph.add_argument("--bm-disruption", type=float, default=d.bm_disruption)
    ph.add_argument("--hk-prob", type=float, default=d.hyperkeratosis_prob)
    ph.add_argument("--speckle-scale", type=float, default=d.speckle_scale)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("split", help="write a leave-one-rare-lesion-out plan")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--rare", choices=[label.value for label in LesionLabel], default="invasive")
    sp.add_argument("--val-common", type=int, default=9)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--folds", type=int, default=None, help="override the default R - 1 folds")
    sp.add_argument("--out", help="plan file (default: split_plan.json next to the manifest)")
    sp.set_defaults(func=cmd_split)

    rn = sub.add_parser("run", help="cross-validated training and evaluation from a config file")
    rn.add_argument("config")
    rn.add_argument("--output-dir", help="override output_dir from the config")
    rn.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    rn.set_defaults(func=cmd_run)

    mx = sub.add_parser("matrix", help="run every backbone x regime cell and one combined table")
    mx.add_argument("config")
    mx.set_defaults(func=cmd_matrix)

    rp = sub.add_parser("report", help="render a table from finished runs")
    rp.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    rp.add_argument("--human", action="store_true", help="append the human-rater reference row")
    rp.add_argument("--f1", choices=["macro", "invasive"], default="macro")
    rp.add_argument("--out", help="also write report.txt and report.json here")
    rp.set_defaults(func=cmd_report)

    fw = sub.add_parser("fetch-weights", help=f"download pretrained checkpoints into ${CHECKPOINT_ENV}")
    fw.add_argument("--backbone", action="append", default=[], choices=[b.value for b in BackboneId])
    fw.add_argument("--surrogate", action="store_true",
                    help="write offline stand-in weights (seeded random, calibrated batch norm)")
    fw.add_argument("--dir", help="target directory for --surrogate")
    fw.add_argument("--quiet", action="store_true")
    fw.set_defaults(func=cmd_fetch_weights)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:
        for kind, code, category in _ERRORS:
            if isinstance(exc, kind):
                print(f"octlesion: {category}: {exc}", file=sys.stderr)
                return code
        print(f"octlesion: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
