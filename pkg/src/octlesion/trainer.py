"""Class-balanced cross-entropy and the per-fold training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .dataset import DatasetManifest, ImageRef, LesionLabel, read_image
from .models import ClassifierModel, parameter_digest
from .pipeline import (
    AugmentSpec,
    Normalization,
    PreprocessSpec,
    augment,
    hflip,
    intensity_stats,
    preprocess,
    replicate_channels,
    sample_rng,
)
from .splits import Fold

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int, lesion_ids: list[str]):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.lesion_ids = lesion_ids


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 5
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # (benign, invasive); None derives them from the fold's training images
    class_weights: tuple[float, float] | None = None
    seed: int = 0
    # reuse frozen-backbone features across epochs when augmentation is geometric only
    feature_cache: bool = True

    def __post_init__(self):
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam hyper-parameters")
        if self.class_weights is not None:
            w = self.class_weights
            if len(w) != 2 or min(w) <= 0 or abs(sum(w) - 1.0) > 1e-9:
                raise ValueError("class_weights must be two positive numbers summing to 1")


@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    final_digests: dict[str, str] = field(default_factory=dict)
    class_weights: tuple[float, float] = (0.5, 0.5)
    n_train_images: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(
            list(d["epoch_losses"]), int(d["steps"]), dict(d["final_digests"]),
            tuple(d["class_weights"]), int(d.get("n_train_images", 0)),
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class ImageStore:
    """Reads manifest images with an in-memory cache and records every path requested."""

    def __init__(self, manifest: DatasetManifest, cache: bool = True):
        self.manifest = manifest
        self.cache = cache
        self._images: dict[str, np.ndarray] = {}
        self.accessed: set[str] = set()

    def read(self, image: ImageRef) -> np.ndarray:
        path = str(self.manifest.image_path(image))
        self.accessed.add(path)
        if image.image_id in self._images:
            return self._images[image.image_id]
        pixels = read_image(path)
        if self.cache:
            self._images[image.image_id] = pixels
        return pixels


def class_weights(counts: Mapping) -> np.ndarray:
    """Normalised inverse class frequency, ordered (benign, invasive)."""
    n = {LesionLabel(k): v for k, v in counts.items()}
    nb, ni = n.get(LesionLabel.BENIGN, 0), n.get(LesionLabel.INVASIVE, 0)
    if nb <= 0 or ni <= 0:
        raise ValueError(f"both class counts must be positive, got benign={nb}, invasive={ni}")
    # (1/n_c) / sum_k (1/n_k) reduces to n_other / total for two classes
    total = nb + ni
    return np.array([ni / total, nb / total])


def weighted_ce_loss(logits: torch.Tensor, labels: torch.Tensor, weights) -> torch.Tensor:
    """Weighted average of per-sample cross-entropy: sum w_y * nll / sum w_y."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() > 1):
        raise ValueError("labels must be 0 (benign) or 1 (invasive)")
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    w = torch.as_tensor(np.asarray(weights, dtype=float), dtype=logits.dtype)
    nll = -torch.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    wy = w[labels]
    return (wy * nll).sum() / wy.sum()


def weighted_ce_grad(logits: np.ndarray, labels: np.ndarray, weights) -> np.ndarray:
    """Analytic d(loss)/d(logits): (softmax - onehot) * w_y / sum w_y."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=int)
    w = np.asarray(weights, dtype=float)[y]
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.eye(2)[y]
    return (p - onehot) * (w / w.sum())[:, None]


def fold_samples(manifest: DatasetManifest, lesion_ids) -> list[tuple[ImageRef, int, str]]:
    """(image, class index, lesion id) for every image of ``lesion_ids``, in manifest order."""
    wanted = set(lesion_ids)
    return [
        (image, lesion.label.index, lesion.lesion_id)
        for lesion in manifest.lesions
        if lesion.lesion_id in wanted
        for image in lesion.images
    ]


def resolve_preprocess(pre: PreprocessSpec, manifest: DatasetManifest, lesion_ids, store: ImageStore | None = None) -> PreprocessSpec:
    """Fill in dataset statistics from the given (training) lesions when they are needed."""
    if pre.resolved:
        return pre
    store = store or ImageStore(manifest)
    mean, std = intensity_stats(store.read(im) for im, _, _ in fold_samples(manifest, lesion_ids))
    return PreprocessSpec(
        pre.target_height_px, pre.target_width_px, pre.interpolation, pre.channel_mode,
        Normalization.DATASET_STATS, mean, std,
    )


def _check_fold(manifest: DatasetManifest, fold: Fold) -> None:
    known = {les.lesion_id for les in manifest.lesions}
    unknown = [i for i in (*fold.train, *fold.validation) if i not in known]
    if unknown:
        raise ValueError(f"fold {fold.fold_index} names unknown lesions {unknown[:5]}")
    leaked = set(fold.train) & set(fold.validation)
    if leaked:
        raise ValueError(f"fold {fold.fold_index} trains on validation lesions {sorted(leaked)}")


def _to_batch(arrays: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays))


def train_fold(
    model: ClassifierModel,
    manifest: DatasetManifest,
    fold: Fold,
    train_cfg: TrainConfig,
    pre: PreprocessSpec,
    aug: AugmentSpec,
    store: ImageStore | None = None,
    dump_path: str | os.PathLike | None = None,
    context: dict | None = None,
    feature_bank: FeatureBank | None = None,
) -> tuple[ClassifierModel, TrainHistory]:
    """Train ``model`` on the fold's training lesions; validation images are never read.

    Each epoch visits every training image once in a seeded shuffled order,
    in batches of ``batch_size`` (the last one may be smaller).  On a
    non-finite loss a diagnostic JSON is written to ``dump_path`` (if given)
    and ``TrainingDiverged`` is raised.
    """
    train_cfg.validate()
    aug.validate()
    pre.validate()
    if not pre.resolved:
        raise ValueError("dataset_stats normalization needs resolved statistics (see resolve_preprocess)")
    _check_fold(manifest, fold)
    store = store or ImageStore(manifest)
    samples = fold_samples(manifest, fold.train)
    if not samples:
        raise ValueError(f"fold {fold.fold_index} has no training images")
    labels = np.array([s[1] for s in samples])

    if train_cfg.class_weights is not None:
        weights = np.array(train_cfg.class_weights)
    else:
        counts = {LesionLabel.BENIGN: int((labels == 0).sum()), LesionLabel.INVASIVE: int((labels == 1).sum())}
        weights = class_weights(counts)
    history = TrainHistory(class_weights=(float(weights[0]), float(weights[1])), n_train_images=len(samples))

    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(
        params, lr=train_cfg.learning_rate, betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps
    ) if params else None

    seed = train_cfg.seed
    cached = train_cfg.feature_cache and model.backbone_frozen and not aug.photometric
    flips = aug.enabled and aug.hflip_prob > 0
    features = None
    if cached:
        features = _frozen_features(model, store, samples, pre, flips, feature_bank)

    def sample_input(idx: int, epoch: int) -> np.ndarray:
        rng = sample_rng(seed, epoch, idx)
        return preprocess(augment(store.read(samples[idx][0]), aug, rng), pre)

    def sample_flip(idx: int, epoch: int) -> bool:
        # same draw augment() makes first
        return flips and sample_rng(seed, epoch, idx).random() < aug.hflip_prob

    bs = train_cfg.batch_size
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(train_cfg.epochs):
            model.train(True)
            order = sample_rng(seed, epoch).permutation(len(samples))
            batch_losses = []
            for start in range(0, len(order), bs):
                idx = order[start : start + bs]
                y = torch.from_numpy(labels[idx])
                if cached:
                    feats = torch.stack([features[int(sample_flip(i, epoch))][i] for i in idx])
                    logits = model.head(feats)
                else:
                    x = _to_batch([sample_input(i, epoch) for i in idx])
                    if model.backbone_frozen:
                        with torch.no_grad():
                            feats = model.backbone(x)
                        logits = model.head(feats)
                    else:
                        logits = model(x)
                loss = weighted_ce_loss(logits, y, weights)
                if not torch.isfinite(loss):
                    lesion_ids = [samples[i][2] for i in idx]
                    msg = f"non-finite loss {loss.item()} at epoch {epoch}, step {history.steps}"
                    if dump_path is not None:
                        Path(dump_path).write_text(json.dumps({
                            "epoch": epoch, "step": history.steps, "loss": repr(loss.item()),
                            "lesion_ids": lesion_ids, "fold_index": fold.fold_index, **(context or {}),
                        }, indent=2) + "\n")
                    raise TrainingDiverged(msg, epoch, history.steps, lesion_ids)
                if optimizer is not None:
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                history.steps += 1
                batch_losses.append(float(loss.item()))
            history.epoch_losses.append(float(np.mean(batch_losses)))
            log.debug("fold %d epoch %d loss %.5f", fold.fold_index, epoch, history.epoch_losses[-1])

    model.eval()
    history.final_digests = {
        "backbone": parameter_digest(model, "backbone"),
        "head": parameter_digest(model, "head"),
    }
    return model, history


class FeatureBank:
    """Frozen-backbone features shared across folds and epochs.

    Keys combine the backbone's state digest (parameters and buffers), the
    preprocessing spec, the image id and the flip flag, so a bank can only
    return features the same frozen backbone would compute.
    """

    def __init__(self):
        self._features: dict[tuple, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self._features)

    def lookup(self, model: ClassifierModel, store: ImageStore, images: list[ImageRef],
               pre: PreprocessSpec, flipped: bool, chunk: int = 25) -> torch.Tensor:
        state = _state_digest(model.backbone)
        keys = [(state, pre, im.image_id, flipped) for im in images]
        missing = [i for i, k in enumerate(keys) if k not in self._features]
        model.backbone.eval()
        for start in range(0, len(missing), chunk):
            part = missing[start : start + chunk]
            arrays = []
            for i in part:
                img = replicate_channels(store.read(images[i]))
                arrays.append(preprocess(hflip(img) if flipped else img, pre))
            with torch.no_grad():
                feats = model.backbone(_to_batch(arrays))
            for i, f in zip(part, feats):
                self._features[keys[i]] = f
        return torch.stack([self._features[k] for k in keys])


def _state_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _frozen_features(model, store, samples, pre, with_flips: bool, bank: FeatureBank | None = None):
    """Backbone features per sample: [unflipped, flipped] (flipped repeats unflipped if unused)."""
    bank = bank if bank is not None else FeatureBank()
    images = [s[0] for s in samples]
    plain = bank.lookup(model, store, images, pre, False)
    flipped = bank.lookup(model, store, images, pre, True) if with_flips else plain
    return [plain, flipped]
