"""Synthetic layered-tissue OCT B-scans.

Each image is rendered top to bottom as an optional bright hyperkeratosis
band, a dark epithelium, a thin bright basement-membrane (BM) line and a
textured lamina propria.  Invasive lesions lose the BM line over one
contiguous run of columns; there the epithelium fades into the lamina
propria through an irregular ramp, so no clear border is left.

Morphology (layer depths, undulation, hyperkeratosis, disrupted interval)
is drawn once per lesion.  Images of a lesion only differ by a small
lateral shift and their own speckle, so they are strongly correlated.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d, gaussian_filter

from .dataset import (
    DatasetManifest,
    ImageRef,
    LesionLabel,
    LesionRecord,
    save_manifest,
    write_image,
)

# Unattenuated layer levels on a [0, 1] scale.
EPITHELIUM_LEVEL = 0.18
LAMINA_LEVEL = 0.32
HYPERKERATOSIS_LEVEL = 0.85
LEVEL_JITTER = 0.02
TEXTURE_GAIN = 0.5
RAMP_HALF_WIDTH = 8


@dataclass(frozen=True)
class PhantomParams:
    image_height_px: int = 180
    image_width_px: int = 260
    epithelium_depth_px: tuple[int, int] = (30, 60)
    bm_brightness: float = 0.8
    bm_disruption: float = 0.9
    hyperkeratosis_prob: float = 0.3
    speckle_scale: float = 0.3
    attenuation_per_px: float = 0.003
    images_per_lesion: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epithelium_depth_px", tuple(self.epithelium_depth_px))

    def validate(self) -> None:
        if self.image_height_px <= 0 or self.image_width_px <= 0:
            raise ValueError("image dimensions must be positive")
        lo, hi = self.epithelium_depth_px
        if not 0 < lo <= hi < self.image_height_px:
            raise ValueError(
                f"epithelium_depth_px {self.epithelium_depth_px} must lie strictly inside "
                f"the image height {self.image_height_px}"
            )
        if not 0.0 <= self.bm_brightness <= 1.0:
            raise ValueError("bm_brightness must be in [0, 1]")
        # zero would make invasive images indistinguishable from benign ones
        if not 0.0 < self.bm_disruption <= 1.0:
            raise ValueError("bm_disruption must be in (0, 1]")
        if not 0.0 <= self.hyperkeratosis_prob <= 1.0:
            raise ValueError("hyperkeratosis_prob must be in [0, 1]")
        if self.speckle_scale < 0 or self.attenuation_per_px < 0:
            raise ValueError("speckle_scale and attenuation_per_px must be >= 0")
        if self.images_per_lesion <= 0:
            raise ValueError("images_per_lesion must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class LesionMorphology:
    label: LesionLabel
    epithelium_depth: int
    undulation_amp: float
    undulation_period: float
    undulation_phase: float
    hk_thickness: int  # 0 when the lesion has no hyperkeratosis
    epithelium_level: float
    lamina_level: float
    disrupted: tuple[int, int] | None  # [start, stop) columns without a BM line
    texture_seed: int


@dataclass
class PhantomImage:
    pixels: np.ndarray  # uint8, H x W
    true_bm_rows: np.ndarray  # int, per column; -1 where the BM line is absent

    @property
    def bm_present(self) -> np.ndarray:
        return self.true_bm_rows >= 0


def sample_morphology(
    label: LesionLabel, params: PhantomParams, rng: np.random.Generator
) -> LesionMorphology:
    params.validate()
    lo, hi = params.epithelium_depth_px
    width = params.image_width_px
    depth = int(rng.integers(lo, hi + 1))
    amp = float(rng.uniform(0.0, 4.0))
    # keep the undulating line inside the image
    amp = min(amp, float(depth - 1), float(params.image_height_px - 2 - depth))
    amp = max(amp, 0.0)
    period = float(rng.uniform(0.6, 1.6) * width)
    phase = float(rng.uniform(0.0, 2 * np.pi))
    has_hk = rng.random() < params.hyperkeratosis_prob
    hk = int(rng.integers(3, 9)) if has_hk else 0
    hk = min(hk, max(depth - 10, 0))
    epi = EPITHELIUM_LEVEL + float(rng.uniform(-LEVEL_JITTER, LEVEL_JITTER))
    lam = LAMINA_LEVEL + float(rng.uniform(-LEVEL_JITTER, LEVEL_JITTER))
    disrupted = None
    if label is LesionLabel.INVASIVE:
        span = max(1, int(round(params.bm_disruption * width)))
        start = int(rng.integers(0, width - span + 1))
        disrupted = (start, start + span)
    texture_seed = int(rng.integers(0, 2**31 - 1))
    return LesionMorphology(
        label, depth, amp, period, phase, hk, epi, lam, disrupted, texture_seed
    )


def render_image(
    morph: LesionMorphology, params: PhantomParams, rng: np.random.Generator
) -> PhantomImage:
    h, w = params.image_height_px, params.image_width_px
    rows = np.arange(h)[:, None].astype(float)
    cols = np.arange(w, dtype=float)

    shift = float(rng.uniform(-6.0, 6.0))
    bm = morph.epithelium_depth + morph.undulation_amp * np.sin(
        2 * np.pi * (cols + shift) / morph.undulation_period + morph.undulation_phase
    )
    bm_rows = np.clip(np.round(bm).astype(int), 1, h - 2)

    epi, lam = morph.epithelium_level, morph.lamina_level
    img = np.where(rows < bm_rows[None, :], epi, lam)

    if params.speckle_scale > 0:
        tex_rng = np.random.default_rng(morph.texture_seed)
        texture = gaussian_filter(tex_rng.standard_normal((h, w)), sigma=(2.0, 4.0))
        texture /= texture.std() + 1e-12
        lam_texture = TEXTURE_GAIN * params.speckle_scale * lam * texture
        img = img + np.where(rows > bm_rows[None, :], lam_texture, 0.0)

    present = np.ones(w, dtype=bool)
    if morph.disrupted is not None:
        start, stop = morph.disrupted
        present[start:stop] = False
        # irregular invasion front: a smooth random walk of the border depth
        walk = np.cumsum(rng.normal(0.0, 1.5, size=w))
        walk = gaussian_filter1d(walk - walk.mean(), sigma=3.0)
        front = bm_rows + np.clip(walk, -10, 10)
        t = np.clip((rows - front[None, :] + RAMP_HALF_WIDTH) / (2 * RAMP_HALF_WIDTH), 0.0, 1.0)
        ramp = epi + (lam - epi) * t
        if params.speckle_scale > 0:
            ramp = ramp + np.where(t > 0.5, lam_texture, 0.0)
        img[:, ~present] = ramp[:, ~present]

    surround = max(epi, lam)
    line_value = surround + params.bm_brightness * (1.0 - surround)
    cidx = np.flatnonzero(present)
    img[bm_rows[cidx], cidx] = line_value

    if morph.hk_thickness > 0:
        img[: morph.hk_thickness, :] = HYPERKERATOSIS_LEVEL

    if params.speckle_scale > 0:
        shape = 1.0 / params.speckle_scale**2
        img = img * rng.gamma(shape, 1.0 / shape, size=(h, w))

    if params.attenuation_per_px > 0:
        img = img * np.exp(-params.attenuation_per_px * rows)

    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    true_rows = np.where(present, bm_rows, -1)
    return PhantomImage(pixels, true_rows)


def generate_image(
    label: LesionLabel, params: PhantomParams, rng: np.random.Generator
) -> PhantomImage:
    """One image of a freshly sampled lesion; deterministic given ``rng``'s state."""
    return render_image(sample_morphology(label, params, rng), params, rng)


def _lesion_rng(seed: int, lesion_index: int, image_index: int | None = None):
    key = [seed, lesion_index] if image_index is None else [seed, lesion_index, image_index]
    return np.random.default_rng(np.random.SeedSequence(key))


def generate_dataset(
    params: PhantomParams,
    n_benign: int,
    n_invasive: int,
    out_dir: str | os.PathLike,
    site: str = "phantom",
) -> DatasetManifest:
    """Render a labelled phantom dataset under ``out_dir`` and write its manifest.

    Files written: ``manifest.csv``, ``phantom_params.json`` and one PNG per
    image under ``images/<lesion_id>/``.  Lesion ids are ``L000``, ``L001``...
    with labels assigned by a seeded permutation, so ids carry no label
    information.
    """
    params.validate()
    if n_benign <= 0 or n_invasive <= 0:
        raise ValueError("n_benign and n_invasive must both be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")

    n = n_benign + n_invasive
    pool = [LesionLabel.BENIGN] * n_benign + [LesionLabel.INVASIVE] * n_invasive
    order = np.random.default_rng(np.random.SeedSequence([params.seed])).permutation(n)
    labels = [pool[k] for k in order]
    width = max(3, len(str(n - 1)))

    lesions = []
    for i, label in enumerate(labels):
        lesion_id = f"L{i:0{width}d}"
        morph = sample_morphology(label, params, _lesion_rng(params.seed, i))
        lesion_dir = out / "images" / lesion_id
        lesion_dir.mkdir(parents=True, exist_ok=True)
        refs = []
        for j in range(params.images_per_lesion):
            image = render_image(morph, params, _lesion_rng(params.seed, i, j))
            rel = f"images/{lesion_id}/{lesion_id}_{j}.png"
            write_image(out / rel, image.pixels)
            refs.append(ImageRef(f"images/{lesion_id}/{lesion_id}_{j}", rel, *image.pixels.shape))
        lesions.append(LesionRecord(lesion_id, label, tuple(refs), site))

    manifest = DatasetManifest(tuple(lesions), out)
    save_manifest(manifest, out / "manifest.csv")
    sidecar = {
        "generator": "octlesion.phantom",
        "params": asdict(params),
        "n_benign": n_benign,
        "n_invasive": n_invasive,
    }
    (out / "phantom_params.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return manifest

