"""Cross-validated runs and run matrices.

A run directory looks like::

    run.json            config digest, global seed, fold seeds, checkpoint digest
    config.yaml         the config as loaded
    split_plan.json     the fold plan (plus digest and seed)
    fold_00/            model.safetensors(.json), history.json, fold_result.json
    ...
    metrics.json        per-fold and mean metrics
    report.txt          one-row table

Completed folds are found by their ``fold_result.json`` carrying the same
config digest and are not retrained.  Nothing is written outside the output
directory.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, RunMatrix, save_config
from .dataset import DatasetManifest, load_manifest
from .evaluator import (
    HUMAN_RATER,
    FoldResult,
    Metrics,
    MetricsReport,
    aggregate,
    evaluate_fold,
    write_report,
)
from .models import build_model, file_sha256, resolve_checkpoint, save_model
from .splits import SplitError, SplitPlan, load_plan, make_splits, verify_plan
from .trainer import FeatureBank, ImageStore, resolve_preprocess, train_fold

log = logging.getLogger(__name__)


class ConfigMismatch(RuntimeError):
    """The output directory holds a run made with a different config."""


def fold_seed(global_seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([global_seed, fold_index]).generate_state(1)[0])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _stamp(cfg: RunConfig) -> dict:
    return {"config_digest": cfg.digest(), "global_seed": cfg.global_seed}


def build_plan(cfg: RunConfig, manifest: DatasetManifest) -> SplitPlan:
    if cfg.plan is not None:
        try:
            plan = load_plan(cfg.plan)
        except (OSError, ValueError, KeyError) as exc:
            raise SplitError(f"cannot read split plan {cfg.plan}: {exc}") from None
    else:
        s = cfg.split
        plan = make_splits(manifest, s.rare_label, s.n_val_common, s.seed, s.n_folds)
    problems = verify_plan(plan, manifest)
    if problems:
        raise SplitError("invalid split plan: " + "; ".join(problems[:5]))
    return plan


def fold_dir(out: Path, fold_index: int) -> Path:
    return out / f"fold_{fold_index:02d}"


def _completed(cfg: RunConfig, out: Path, fold_index: int) -> FoldResult | None:
    d = _read_json(fold_dir(out, fold_index) / "fold_result.json")
    if d is None or d.get("config_digest") != cfg.digest():
        return None
    return FoldResult.from_dict(d["result"])


def run_fold(cfg: RunConfig, manifest: DatasetManifest, plan: SplitPlan, fold_index: int,
             bank: FeatureBank | None = None, store: ImageStore | None = None) -> FoldResult:
    """Train and evaluate one fold, writing its artifacts under ``fold_XX/``."""
    fold = plan.folds[fold_index]
    out = fold_dir(cfg.output, fold_index)
    out.mkdir(parents=True, exist_ok=True)
    seed = fold_seed(cfg.global_seed, fold_index)
    store = store or ImageStore(manifest)
    stamp = {**_stamp(cfg), "fold_index": fold_index, "fold_seed": seed}

    model = build_model(
        cfg.backbone, cfg.regime, cfg.model.dropout_p, seed,
        cfg.checkpoint, cfg.model.checkpoint_sha256,
    )
    pre = resolve_preprocess(cfg.preprocess, manifest, fold.train, store)
    train_cfg = replace(cfg.train, seed=seed)
    model, history = train_fold(
        model, manifest, fold, train_cfg, pre, cfg.augment, store,
        dump_path=out / "diverged.json", context=stamp, feature_bank=bank,
    )
    result = evaluate_fold(model, manifest, fold, pre, store)

    save_model(model, out / "model.safetensors", extra=stamp)
    _write_json(out / "history.json", {**stamp, "history": history.to_dict()})
    preprocess_used = {"dataset_mean": pre.dataset_mean, "dataset_std": pre.dataset_std}
    # written last: its presence marks the fold complete
    _write_json(out / "fold_result.json", {**stamp, "preprocess": preprocess_used, "result": result.to_dict()})
    return result


def _run_fold_job(cfg: RunConfig, fold_index: int) -> FoldResult:
    manifest = load_manifest(cfg.manifest)
    return run_fold(cfg, manifest, build_plan(cfg, manifest), fold_index)


def _checkpoint_digest(cfg: RunConfig) -> str | None:
    if not cfg.regime.pretrained:
        return None
    return file_sha256(resolve_checkpoint(cfg.backbone, cfg.checkpoint, cfg.model.checkpoint_sha256))


def run(cfg: RunConfig, jobs: int = 1) -> MetricsReport:
    """Train and evaluate every fold of ``cfg`` (resuming finished folds) and write the report."""
    cfg.validate()
    manifest = load_manifest(cfg.manifest)
    manifest.require_both_labels()
    plan = build_plan(cfg, manifest)
    out = cfg.output
    digest = cfg.digest()

    existing = _read_json(out / "run.json")
    if existing is not None and existing.get("config_digest") != digest:
        raise ConfigMismatch(
            f"{out} holds a run with config digest {existing.get('config_digest')}, "
            f"this config has {digest}; use a fresh output_dir"
        )
    out.mkdir(parents=True, exist_ok=True)
    seeds = [fold_seed(cfg.global_seed, f.fold_index) for f in plan.folds]
    _write_json(out / "run.json", {
        **_stamp(cfg),
        "fold_seeds": seeds,
        "n_folds": len(plan),
        "checkpoint_sha256": _checkpoint_digest(cfg),
    })
    save_config(cfg, out / "config.yaml")
    _write_json(out / "split_plan.json", {**plan.to_dict(), **_stamp(cfg)})

    results: dict[int, FoldResult] = {}
    todo = []
    for fold in plan.folds:
        done = _completed(cfg, out, fold.fold_index)
        if done is not None:
            log.info("fold %d already complete, skipping", fold.fold_index)
            results[fold.fold_index] = done
        else:
            todo.append(fold.fold_index)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, res in zip(todo, pool.map(_run_fold_job, [cfg] * len(todo), todo)):
                results[k] = res
    else:
        bank, store = FeatureBank(), ImageStore(manifest)
        for k in todo:
            log.info("training fold %d/%d", k + 1, len(plan))
            results[k] = run_fold(cfg, manifest, plan, k, bank, store)

    meta = {
        **_stamp(cfg),
        "backbone": cfg.backbone.value,
        "regime": cfg.regime.value,
        "fold_seeds": seeds,
        "split_seed": cfg.split.seed,
    }
    report = aggregate(list(results.values()), meta)
    _write_json(out / "metrics.json", report.to_dict())
    write_report([report], out, stem="report")
    return report


def load_report(path: str | os.PathLike) -> MetricsReport:
    """Read ``metrics.json`` from a run directory (or the file itself)."""
    p = Path(path)
    if p.is_dir():
        p = p / "metrics.json"
    d = _read_json(p)
    if d is None:
        raise FileNotFoundError(f"no readable metrics file at {p}")
    return MetricsReport.from_dict(d)


@dataclass
class CellOutcome:
    config: RunConfig
    report: MetricsReport


def _failed(cfg: RunConfig, exc: BaseException) -> MetricsReport:
    meta = {**_stamp(cfg), "backbone": cfg.backbone.value, "regime": cfg.regime.value,
            "failed": True, "error": f"{type(exc).__name__}: {exc}"}
    # placeholder values; the table shows FAILED for this row
    return MetricsReport([], Metrics(0.0, 0.0, 0.0, 0.0, 0.0), meta)


def _run_cell(cfg: RunConfig) -> MetricsReport:
    try:
        return run(cfg)
    except Exception as exc:  # a failed cell is reported, not fatal
        log.error("cell %s %s failed: %s", cfg.backbone.value, cfg.regime.value, exc)
        return _failed(cfg, exc)


def run_matrix(matrix: RunMatrix) -> list[CellOutcome]:
    """Run every (backbone, regime) cell and write the combined table.

    All cells are validated before any training.  Failed cells appear as
    ``FAILED`` rows.
    """
    cells = matrix.cells()
    if matrix.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=matrix.jobs) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(c) for c in cells]
    out = matrix.output
    out.mkdir(parents=True, exist_ok=True)
    refs = [HUMAN_RATER] if matrix.human_reference else []
    write_report(reports, out, refs, stem="report")
    return [CellOutcome(c, r) for c, r in zip(cells, reports)]

