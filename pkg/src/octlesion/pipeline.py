"""Preprocessing and online augmentation of single-channel OCT images.

Images enter as H x W uint8 arrays.  Training samples go through
``augment`` (channel replication, horizontal flip, photometric jitter) and
then ``preprocess`` (bilinear resize to 224 x 224, replication if still
single-channel, per-channel standardisation).  Validation samples go
through ``preprocess`` only.

All randomness comes from an explicit ``numpy.random.Generator``; use
``sample_rng`` to derive one per (seed, epoch, sample) so results do not
depend on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

# Per-channel RGB statistics the published ImageNet backbones were trained with.
PRETRAINED_MEAN = (0.485, 0.456, 0.406)
PRETRAINED_STD = (0.229, 0.224, 0.225)


class Normalization(str, Enum):
    PRETRAINED_STATS = "pretrained_stats"
    DATASET_STATS = "dataset_stats"


@dataclass(frozen=True)
class PreprocessSpec:
    target_height_px: int = 224
    target_width_px: int = 224
    interpolation: str = "bilinear"
    channel_mode: str = "replicate"
    normalization: Normalization = Normalization.PRETRAINED_STATS
    # used by dataset_stats; intensities on a [0, 1] scale
    dataset_mean: float | None = None
    dataset_std: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "normalization", Normalization(self.normalization))

    def validate(self) -> None:
        if self.target_height_px <= 0 or self.target_width_px <= 0:
            raise ValueError("target size must be positive")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is supported")
        if self.channel_mode != "replicate":
            raise ValueError("only channel_mode 'replicate' is supported")
        if self.dataset_std is not None and self.dataset_std <= 0:
            raise ValueError("dataset_std must be positive")

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        if self.normalization is Normalization.PRETRAINED_STATS:
            return np.array(PRETRAINED_MEAN), np.array(PRETRAINED_STD)
        if self.dataset_mean is None or self.dataset_std is None:
            raise ValueError("dataset_stats normalization needs dataset_mean and dataset_std")
        return np.full(3, self.dataset_mean), np.full(3, self.dataset_std)

    @property
    def resolved(self) -> bool:
        return self.normalization is Normalization.PRETRAINED_STATS or (
            self.dataset_mean is not None and self.dataset_std is not None
        )


@dataclass(frozen=True)
class AugmentSpec:
    hflip_prob: float = 0.5
    brightness_delta: float = 0.2
    contrast_delta: float = 0.2
    saturation_delta: float = 0.2
    enabled: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        for name in ("brightness_delta", "contrast_delta", "saturation_delta"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @property
    def photometric(self) -> bool:
        """True when jitter can change pixel values."""
        return self.enabled and (
            self.brightness_delta > 0 or self.contrast_delta > 0 or self.saturation_delta > 0
        )


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _source_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the borders
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W (or C x H x W) array to ``out_h`` x ``out_w``.

    Output is float64 and never leaves the input's [min, max] range.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=float)
    if img.ndim not in (2, 3) or img.shape[-1] < 1 or img.shape[-2] < 1:
        raise ValueError(f"expected a non-empty H x W or C x H x W array, got shape {img.shape}")
    r0, r1, fy = _source_coords(img.shape[-2], out_h)
    c0, c1, fx = _source_coords(img.shape[-1], out_w)
    top = img[..., r0, :]
    bottom = img[..., r1, :]
    rows = top + (bottom - top) * fy[:, None]
    left = rows[..., c0]
    right = rows[..., c1]
    return left + (right - left) * fx


def hflip(image: np.ndarray) -> np.ndarray:
    """Reverse the column (last) axis."""
    return np.asarray(image)[..., ::-1].copy()


def replicate_channels(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        return img
    return np.repeat(img[None], 3, axis=0)


def apply_jitter(
    image: np.ndarray, brightness: float = 1.0, contrast: float = 1.0, saturation: float = 1.0
) -> np.ndarray:
    """Brightness, contrast, then saturation, clamping to [0, 255] after each step.

    Contrast pulls pixels towards the global image mean; saturation towards the
    per-pixel mean over channels, which is a no-op on replicated grayscale.
    """
    img = np.asarray(image, dtype=float)
    # unit factors are skipped so they are exact identities
    if brightness != 1.0:
        img = np.clip(img * brightness, 0.0, 255.0)
    if contrast != 1.0:
        mean = img.mean()
        img = np.clip(mean + contrast * (img - mean), 0.0, 255.0)
    if saturation != 1.0 and img.ndim == 3:
        gray = img.mean(axis=0, keepdims=True)
        img = np.clip(gray + saturation * (img - gray), 0.0, 255.0)
    return img


def sample_jitter_factors(spec: AugmentSpec, rng: np.random.Generator) -> tuple[float, float, float]:
    # always three draws so the stream stays aligned whatever the deltas are
    u = rng.uniform(-1.0, 1.0, size=3)
    deltas = np.array([spec.brightness_delta, spec.contrast_delta, spec.saturation_delta])
    b, c, s = 1.0 + deltas * u
    return float(b), float(c), float(s)


def photometric_jitter(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.enabled:
        return np.asarray(image, dtype=float)
    return apply_jitter(image, *sample_jitter_factors(spec, rng))


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation; returns a 3 x H x W float array on the 0..255 scale."""
    img = replicate_channels(image)
    if not spec.enabled:
        return img
    if rng.random() < spec.hflip_prob:
        img = hflip(img)
    return photometric_jitter(img, spec, rng)


def preprocess(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Resize, replicate to 3 channels and standardise; returns float32 3 x h x w."""
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("empty image")
    resized = resize_bilinear(img, spec.target_height_px, spec.target_width_px)
    rgb = replicate_channels(resized) / 255.0
    mean, std = spec.channel_stats()
    return ((rgb - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def intensity_stats(images: Iterable[np.ndarray]) -> tuple[float, float]:
    """Mean and standard deviation of pixel intensities on a [0, 1] scale."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for img in images:
        x = np.asarray(img, dtype=float) / 255.0
        total += x.sum()
        total_sq += np.square(x).sum()
        count += x.size
    if count == 0:
        raise ValueError("no images")
    mean = total / count
    var = max(total_sq / count - mean**2, 0.0)
    return mean, float(np.sqrt(var)) or 1.0
