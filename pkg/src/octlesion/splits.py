"""Leave-one-rare-lesion-out cross-validation plans.

Every fold validates one rare-label lesion plus ``n_val_common`` common-label
lesions and trains on everything else.  With R rare lesions the default plan
has R - 1 folds; the leftover rare lesion is "reserved" and stays in training
for every fold.  Common validation sets are disjoint across folds.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, LesionLabel


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Fold:
    fold_index: int
    val_rare: str
    val_common: tuple[str, ...]
    train: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "val_common", tuple(self.val_common))
        object.__setattr__(self, "train", tuple(self.train))

    @property
    def validation(self) -> tuple[str, ...]:
        return (self.val_rare, *self.val_common)


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    seed: int
    rare_label: LesionLabel
    reserved_rare: tuple[str, ...]
    n_val_common: int = field(default=9)

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(self.folds))
        object.__setattr__(self, "reserved_rare", tuple(self.reserved_rare))

    def __len__(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rare_label": self.rare_label.value,
            "n_val_common": self.n_val_common,
            "reserved_rare": list(self.reserved_rare),
            "folds": [
                {
                    "fold_index": f.fold_index,
                    "val_rare": f.val_rare,
                    "val_common": list(f.val_common),
                    "train": list(f.train),
                }
                for f in self.folds
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        folds = tuple(
            Fold(f["fold_index"], f["val_rare"], tuple(f["val_common"]), tuple(f["train"]))
            for f in d["folds"]
        )
        return cls(
            folds,
            int(d["seed"]),
            LesionLabel(d["rare_label"]),
            tuple(d["reserved_rare"]),
            int(d["n_val_common"]),
        )


def save_plan(plan: SplitPlan, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_plan(path: str | os.PathLike) -> SplitPlan:
    return SplitPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_splits(
    manifest: DatasetManifest,
    rare_label: LesionLabel = LesionLabel.INVASIVE,
    n_val_common: int = 9,
    seed: int = 0,
    n_folds: int | None = None,
) -> SplitPlan:
    """Build a seeded leave-one-rare-lesion-out plan.

    ``n_folds`` overrides the default R - 1 fold count; any value in [1, R]
    is accepted, and the rare lesions not used for validation are reserved.
    """
    rare_label = LesionLabel(rare_label)
    if n_val_common <= 0:
        raise SplitError("n_val_common must be positive")
    rare = manifest.ids_with_label(rare_label)
    common = manifest.ids_with_label(rare_label.other)
    n_rare = len(rare)
    if n_rare == 0:
        raise SplitError(f"no {rare_label.value} lesions in the manifest")
    if n_folds is None:
        if n_rare < 2:
            raise SplitError(
                f"cannot construct folds: need at least 2 {rare_label.value} lesions, found {n_rare}"
            )
        n_folds = n_rare - 1
    elif not 1 <= n_folds <= n_rare:
        raise SplitError(f"n_folds must be in [1, {n_rare}], got {n_folds}")
    needed = n_folds * n_val_common
    if len(common) < needed:
        raise SplitError(
            f"insufficient {rare_label.other.value} lesions for disjoint validation sets: "
            f"need {n_folds} x {n_val_common} = {needed}, have {len(common)}"
        )

    rng = np.random.default_rng(seed)
    rare_order = [rare[i] for i in rng.permutation(n_rare)]
    common_order = [common[i] for i in rng.permutation(len(common))]
    all_ids = [les.lesion_id for les in manifest.lesions]

    folds = []
    for k in range(n_folds):
        val_rare = rare_order[k]
        val_common = tuple(common_order[k * n_val_common : (k + 1) * n_val_common])
        held_out = {val_rare, *val_common}
        train = tuple(i for i in all_ids if i not in held_out)
        folds.append(Fold(k, val_rare, val_common, train))
    return SplitPlan(tuple(folds), seed, rare_label, tuple(rare_order[n_folds:]), n_val_common)


def verify_plan(plan: SplitPlan, manifest: DatasetManifest) -> list[str]:
    """Check every plan invariant against ``manifest``; returns one message per violation."""
    problems: list[str] = []
    labels = {les.lesion_id: les.label for les in manifest.lesions}
    all_ids = set(labels)
    rare_label = plan.rare_label
    n_rare = sum(1 for lab in labels.values() if lab is rare_label)

    if len(plan.folds) != n_rare - len(plan.reserved_rare):
        problems.append(
            f"fold count {len(plan.folds)} != {rare_label.value} lesions ({n_rare}) "
            f"minus reserved ({len(plan.reserved_rare)})"
        )
    for rid in plan.reserved_rare:
        if labels.get(rid) is not rare_label:
            problems.append(f"reserved lesion {rid} is not a known {rare_label.value} lesion")

    for pos, fold in enumerate(plan.folds):
        tag = f"fold {fold.fold_index}"
        if fold.fold_index != pos:
            problems.append(f"{tag}: index out of order (position {pos})")
        if labels.get(fold.val_rare) is not rare_label:
            problems.append(f"{tag}: validation lesion {fold.val_rare} is not a known {rare_label.value} lesion")
        for cid in fold.val_common:
            if labels.get(cid) is not rare_label.other:
                problems.append(f"{tag}: validation lesion {cid} is not a known {rare_label.other.value} lesion")
        if len(fold.val_common) != plan.n_val_common:
            problems.append(
                f"{tag}: {len(fold.val_common)} common validation lesions, expected {plan.n_val_common}"
            )
        train = set(fold.train)
        if len(train) != len(fold.train):
            problems.append(f"{tag}: training list repeats lesion ids")
        for lid in fold.validation:
            if lid in train:
                problems.append(f"{tag}: validation lesion {lid} also in training (leak)")
        covered = train | set(fold.validation)
        missing = all_ids - covered
        unknown = covered - all_ids
        if missing:
            problems.append(f"{tag}: lesions in neither split: {sorted(missing)}")
        if unknown:
            problems.append(f"{tag}: unknown lesion ids: {sorted(unknown)}")

    seen_rare: dict[str, int] = {}
    for fold in plan.folds:
        if fold.val_rare in plan.reserved_rare:
            problems.append(f"fold {fold.fold_index}: validates reserved lesion {fold.val_rare}")
        if fold.val_rare in seen_rare:
            problems.append(
                f"folds {seen_rare[fold.val_rare]} and {fold.fold_index} share "
                f"{rare_label.value} validation lesion {fold.val_rare}"
            )
        seen_rare.setdefault(fold.val_rare, fold.fold_index)

    seen_common: dict[str, int] = {}
    for fold in plan.folds:
        for cid in fold.val_common:
            if cid in seen_common and seen_common[cid] != fold.fold_index:
                problems.append(
                    f"folds {seen_common[cid]} and {fold.fold_index} share "
                    f"{rare_label.other.value} validation lesion {cid} (not disjoint)"
                )
            seen_common.setdefault(cid, fold.fold_index)
    return problems
