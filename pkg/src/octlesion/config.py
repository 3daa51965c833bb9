"""Run configuration files (YAML) and their digests.

A run config is a nested mapping; every key has a default, and the defaults
are the published training procedure (batch 5, dropout 0.2, Adam at 1e-5,
224 x 224 inputs, flips plus brightness/contrast/saturation jitter).
Relative paths are resolved against the config file's directory.

The digest is the sha256 of the canonical JSON form of the config without
``output_dir``; it is stored with every artifact a run writes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .dataset import LesionLabel
from .models import BackboneId, Regime
from .pipeline import AugmentSpec, Normalization, PreprocessSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSettings:
    rare_label: LesionLabel = LesionLabel.INVASIVE
    n_val_common: int = 9
    seed: int = 0
    n_folds: int | None = None
    # existing plan file to use instead of computing one
    plan_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "rare_label", LesionLabel(self.rare_label))


@dataclass(frozen=True)
class ModelSettings:
    dropout_p: float = 0.2
    # explicit pretrained checkpoint; default is the cached published file
    checkpoint: str | None = None
    checkpoint_sha256: str | None = None


@dataclass(frozen=True)
class RunConfig:
    manifest_path: str
    backbone: BackboneId = BackboneId.RESNET18
    regime: Regime = Regime.RC
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    split: SplitSettings = field(default_factory=SplitSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    output_dir: str = "runs/default"
    global_seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False)

    def validate(self) -> None:
        try:
            self.train.validate()
            self.preprocess.validate()
            self.augment.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 <= self.model.dropout_p < 1.0:
            raise ConfigError("model.dropout_p must be in [0, 1)")
        if self.split.n_val_common <= 0:
            raise ConfigError("split.n_val_common must be positive")
        if self.global_seed < 0:
            raise ConfigError("global_seed must be non-negative")

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def manifest(self) -> Path:
        return self.resolve(self.manifest_path)

    @property
    def output(self) -> Path:
        return self.resolve(self.output_dir)

    @property
    def checkpoint(self) -> Path | None:
        return self.resolve(self.model.checkpoint)

    @property
    def plan(self) -> Path | None:
        return self.resolve(self.split.plan_path)

    def to_dict(self) -> dict:
        d = {
            "manifest_path": self.manifest_path,
            "backbone": self.backbone.value,
            "regime": self.regime.value,
            "train": _plain(asdict(self.train)),
            "preprocess": _plain(asdict(self.preprocess)),
            "augment": _plain(asdict(self.augment)),
            "split": _plain(asdict(self.split)),
            "model": _plain(asdict(self.model)),
            "output_dir": self.output_dir,
            "global_seed": self.global_seed,
        }
        # the trainer seed is derived per fold from global_seed
        d["train"].pop("seed", None)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_output(self, output_dir: str | os.PathLike) -> "RunConfig":
        return replace(self, output_dir=str(output_dir))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and isinstance(value, str):
        return value.value
    return value


def _section(cls, data: dict | None, name: str, **overrides):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")
    data.update(overrides)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def config_from_dict(data: dict, base_dir: str | os.PathLike = ".") -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in fields(RunConfig)} - {"base_dir"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    if "manifest_path" not in data:
        raise ConfigError("manifest_path is required")
    try:
        backbone = BackboneId(data.get("backbone", BackboneId.RESNET18.value))
    except ValueError:
        raise ConfigError(
            f"unknown backbone {data.get('backbone')!r}; choose from {[b.value for b in BackboneId]}"
        ) from None
    try:
        regime = Regime(data.get("regime", Regime.RC.value))
    except ValueError:
        raise ConfigError(f"unknown regime {data.get('regime')!r}; choose from SCR, FT, RC") from None

    pre = dict(data.get("preprocess") or {})
    if pre.get("normalization", "auto") == "auto":
        # pretrained features expect their training statistics; scratch models do not
        pre["normalization"] = (
            Normalization.DATASET_STATS if regime is Regime.SCR else Normalization.PRETRAINED_STATS
        ).value
    train = dict(data.get("train") or {})
    train.pop("seed", None)
    if train.get("class_weights") is not None:
        train["class_weights"] = tuple(train["class_weights"])

    cfg = RunConfig(
        manifest_path=str(data["manifest_path"]),
        backbone=backbone,
        regime=regime,
        train=_section(TrainConfig, train, "train"),
        preprocess=_section(PreprocessSpec, pre, "preprocess"),
        augment=_section(AugmentSpec, data.get("augment"), "augment"),
        split=_section(SplitSettings, data.get("split"), "split"),
        model=_section(ModelSettings, data.get("model"), "model"),
        output_dir=str(data.get("output_dir", "runs/default")),
        global_seed=int(data.get("global_seed", 0)),
        base_dir=Path(base_dir),
    )
    cfg.validate()
    return cfg


def _read_yaml(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    return config_from_dict(_read_yaml(path), path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


REGIME_ORDER = (Regime.SCR, Regime.FT, Regime.RC)


@dataclass(frozen=True)
class RunMatrix:
    backbones: tuple[BackboneId, ...]
    regimes: tuple[Regime, ...]
    shared: dict
    output_dir: str = "runs/matrix"
    human_reference: bool = True
    jobs: int = 1
    base_dir: Path = field(default=Path("."), compare=False)

    def cells(self) -> list[RunConfig]:
        """One config per (backbone, regime), regimes in SCR, FT, RC order per backbone."""
        if not self.backbones or not self.regimes:
            raise ConfigError("matrix needs at least one backbone and one regime")
        out = []
        regimes = [r for r in REGIME_ORDER if r in self.regimes]
        for backbone in self.backbones:
            for regime in regimes:
                data = dict(self.shared)
                data.update(
                    backbone=backbone.value,
                    regime=regime.value,
                    output_dir=str(Path(self.output_dir) / f"{backbone.value}_{regime.value}"),
                )
                out.append(config_from_dict(data, self.base_dir))
        return out

    @property
    def output(self) -> Path:
        p = Path(self.output_dir).expanduser()
        return p if p.is_absolute() else self.base_dir / p


def load_matrix(path: str | os.PathLike) -> RunMatrix:
    path = Path(path)
    data = _read_yaml(path)
    allowed = {"backbones", "regimes", "shared", "output_dir", "human_reference", "jobs"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown matrix key(s): {sorted(unknown)}")
    try:
        backbones = tuple(BackboneId(b) for b in data.get("backbones", [b.value for b in BackboneId]))
    except ValueError as exc:
        raise ConfigError(f"unknown backbone in matrix: {exc}") from None
    try:
        regimes = tuple(Regime(r) for r in data.get("regimes", [r.value for r in REGIME_ORDER]))
    except ValueError as exc:
        raise ConfigError(f"unknown regime in matrix: {exc}") from None
    matrix = RunMatrix(
        backbones,
        regimes,
        dict(data.get("shared") or {}),
        str(data.get("output_dir", "runs/matrix")),
        bool(data.get("human_reference", True)),
        int(data.get("jobs", 1)),
        path.parent,
    )
    matrix.cells()  # validates every cell before anything runs
    return matrix
