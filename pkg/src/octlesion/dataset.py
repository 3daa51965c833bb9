"""Lesion/image data model and the CSV manifest that describes a dataset.

A manifest has one row per image::

    lesion_id,label,image_path,site
    L000,benign,images/L000/L000_0.png,floor of mouth

Rows of the same lesion must be contiguous and agree on label and site.
``image_path`` is relative to the manifest's own directory.  Row numbers in
error messages are file line numbers (the header is line 1).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_COLUMNS = ("lesion_id", "label", "image_path", "site")

NATIVE_HEIGHT_PX = 180
NATIVE_WIDTH_PX = 260


class LesionLabel(str, Enum):
    BENIGN = "benign"
    INVASIVE = "invasive"

    @property
    def index(self) -> int:
        """Class index used for logits: benign 0, invasive 1 (the positive class)."""
        return 0 if self is LesionLabel.BENIGN else 1

    @classmethod
    def from_index(cls, index: int) -> "LesionLabel":
        if index == 0:
            return cls.BENIGN
        if index == 1:
            return cls.INVASIVE
        raise ValueError(f"class index must be 0 or 1, got {index}")

    @property
    def other(self) -> "LesionLabel":
        return LesionLabel.INVASIVE if self is LesionLabel.BENIGN else LesionLabel.BENIGN


class ManifestError(ValueError):
    """Invalid manifest content. ``row`` is the offending file line, if known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass(frozen=True)
class ImageRef:
    image_id: str
    path: str
    height_px: int
    width_px: int

    def __post_init__(self):
        if self.height_px <= 0 or self.width_px <= 0:
            raise ValueError(f"image {self.image_id}: dimensions must be positive")


@dataclass(frozen=True)
class LesionRecord:
    lesion_id: str
    label: LesionLabel
    images: tuple[ImageRef, ...]
    site: str = ""

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if not self.images:
            raise ValueError(f"lesion {self.lesion_id} has no images")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError(f"lesion {self.lesion_id} has repeated image ids")


@dataclass(frozen=True)
class DatasetManifest:
    lesions: tuple[LesionRecord, ...]
    root_dir: Path
    counts: dict[LesionLabel, int] = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "lesions", tuple(self.lesions))
        object.__setattr__(self, "root_dir", Path(self.root_dir))
        seen: set[str] = set()
        for lesion in self.lesions:
            if lesion.lesion_id in seen:
                raise ValueError(f"duplicate lesion_id {lesion.lesion_id!r}")
            seen.add(lesion.lesion_id)
        tally = {label: 0 for label in LesionLabel}
        for lesion in self.lesions:
            tally[lesion.label] += 1
        object.__setattr__(self, "counts", tally)

    def __len__(self) -> int:
        return len(self.lesions)

    def lesion(self, lesion_id: str) -> LesionRecord:
        for lesion in self.lesions:
            if lesion.lesion_id == lesion_id:
                return lesion
        raise KeyError(lesion_id)

    def by_id(self) -> dict[str, LesionRecord]:
        return {lesion.lesion_id: lesion for lesion in self.lesions}

    def ids_with_label(self, label: LesionLabel) -> list[str]:
        return [les.lesion_id for les in self.lesions if les.label is label]

    def image_path(self, image: ImageRef) -> Path:
        return self.root_dir / image.path

    def n_images(self) -> int:
        return sum(len(les.images) for les in self.lesions)

    def require_both_labels(self) -> None:
        missing = [label.value for label, n in self.counts.items() if n == 0]
        if missing:
            raise ManifestError(f"no lesions with label(s) {', '.join(missing)}")


def image_id_for(path: str) -> str:
    """Image ids are the relative path without its extension."""
    return Path(path).with_suffix("").as_posix()


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read an image file as an 8-bit single-channel H x W array."""
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_image(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 array")
    Image.fromarray(pixels, mode="L").save(path, format="PNG", optimize=False)


def _parse_label(token: str, row: int) -> LesionLabel:
    try:
        return LesionLabel(token.strip().lower())
    except ValueError:
        raise ManifestError(f"unknown label {token!r} (expected benign or invasive)", row) from None


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent

    lesions: list[LesionRecord] = []
    current: dict | None = None
    closed_ids: set[str] = set()
    seen_images: dict[str, int] = {}

    def close(entry):
        lesions.append(
            LesionRecord(entry["id"], entry["label"], tuple(entry["images"]), entry["site"])
        )
        closed_ids.add(entry["id"])

    with path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"header must be {','.join(MANIFEST_COLUMNS)}", 1)
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}", row_no
                )
            lesion_id, label_token, image_path, site = (cell.strip() for cell in row)
            if not lesion_id:
                raise ManifestError("empty lesion_id", row_no)
            if not image_path:
                raise ManifestError("empty image_path", row_no)
            label = _parse_label(label_token, row_no)

            if current is not None and current["id"] == lesion_id:
                if label is not current["label"]:
                    raise ManifestError(
                        f"duplicate lesion_id {lesion_id!r} with conflicting label "
                        f"(first seen on row {current['row']})",
                        row_no,
                    )
                if site != current["site"]:
                    raise ManifestError(
                        f"lesion {lesion_id!r} has conflicting site values", row_no
                    )
            else:
                if lesion_id in closed_ids:
                    raise ManifestError(f"duplicate lesion_id {lesion_id!r}", row_no)
                if current is not None:
                    close(current)
                current = {"id": lesion_id, "label": label, "site": site, "images": [], "row": row_no}

            image_id = image_id_for(image_path)
            if image_id in seen_images:
                raise ManifestError(
                    f"duplicate image_id {image_id!r} (first seen on row {seen_images[image_id]})",
                    row_no,
                )
            seen_images[image_id] = row_no
            full = root / image_path
            if not full.is_file():
                raise ManifestError(f"image file not found: {image_path}", row_no)
            try:
                with Image.open(full) as im:
                    width, height = im.size
            except OSError as exc:
                raise ManifestError(f"unreadable image {image_path}: {exc}", row_no) from None
            current["images"].append(ImageRef(image_id, image_path, height, width))

    if current is not None:
        close(current)
    return DatasetManifest(tuple(lesions), root)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write ``manifest`` as CSV; image paths are rewritten relative to ``path``'s directory."""
    path = Path(path)
    target_dir = path.parent
    if not target_dir.is_dir():
        raise OSError(f"directory does not exist: {target_dir}")
    if not os.access(target_dir, os.W_OK):
        raise PermissionError(f"cannot write to {target_dir}")
    same_root = target_dir.resolve() == manifest.root_dir.resolve()
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for lesion in manifest.lesions:
            for image in lesion.images:
                rel = image.path
                if not same_root:
                    rel = Path(
                        os.path.relpath(manifest.root_dir / image.path, target_dir)
                    ).as_posix()
                writer.writerow([lesion.lesion_id, lesion.label.value, rel, lesion.site])
