import os

import numpy as np
import pytest

from octlesion.dataset import (
    DatasetManifest,
    ImageRef,
    LesionLabel,
    LesionRecord,
    ManifestError,
    load_manifest,
    save_manifest,
    write_image,
)

HEADER = "lesion_id,label,image_path,site\n"


def _dataset(tmp_path, rows, images=None):
    """Write the listed image files and a manifest with ``rows``."""
    for rel in images or []:
        (tmp_path / rel).parent.mkdir(parents=True, exist_ok=True)
        write_image(tmp_path / rel, np.zeros((180, 260), dtype=np.uint8))
    path = tmp_path / "manifest.csv"
    path.write_text(HEADER + "".join(r + "\n" for r in rows))
    return path


def test_label_indices():
    assert LesionLabel.BENIGN.index == 0
    assert LesionLabel.INVASIVE.index == 1
    assert LesionLabel.from_index(1) is LesionLabel.INVASIVE
    assert LesionLabel.BENIGN.other is LesionLabel.INVASIVE
    assert len(LesionLabel) == 2
    with pytest.raises(ValueError):
        LesionLabel.from_index(2)


def test_single_benign_lesion(tmp_path):
    path = _dataset(tmp_path, ["L1,benign,a.png,"], ["a.png"])
    m = load_manifest(path)
    assert m.counts == {LesionLabel.BENIGN: 1, LesionLabel.INVASIVE: 0}
    (lesion,) = m.lesions
    assert lesion.images[0].height_px == 180 and lesion.images[0].width_px == 260
    assert lesion.site == ""
    with pytest.raises(ManifestError):
        m.require_both_labels()


def test_multi_image_lesions_grouped(tmp_path):
    rows = ["A,benign,x/1.png,floor", "A,benign,x/2.png,floor", "B,invasive,y/1.png,"]
    m = load_manifest(_dataset(tmp_path, rows, ["x/1.png", "x/2.png", "y/1.png"]))
    assert [les.lesion_id for les in m.lesions] == ["A", "B"]
    assert [im.image_id for im in m.lesions[0].images] == ["x/1", "x/2"]
    assert m.n_images() == 3
    assert sum(m.counts.values()) == len(m.lesions)


def test_duplicate_lesion_conflicting_label(tmp_path):
    rows = ["L006,benign,a.png,", "L007,benign,b.png,", "L007,invasive,c.png,"]
    path = _dataset(tmp_path, rows, ["a.png", "b.png", "c.png"])
    with pytest.raises(ManifestError, match="L007") as exc:
        load_manifest(path)
    assert exc.value.row == 4


def test_non_contiguous_lesion_rows_are_duplicates(tmp_path):
    rows = ["L007,benign,a.png,", "L008,benign,b.png,", "L007,benign,c.png,"]
    path = _dataset(tmp_path, rows, ["a.png", "b.png", "c.png"])
    with pytest.raises(ManifestError, match="duplicate lesion_id 'L007'") as exc:
        load_manifest(path)
    assert exc.value.row == 4


@pytest.mark.parametrize(
    "rows, files, pattern, row",
    [
        (["A,benign,a.png,", "B,benign,a.png,"], ["a.png"], "duplicate image_id", 3),
        (["A,malignant,a.png,"], ["a.png"], "unknown label", 2),
        (["A,benign,missing.png,"], [], "not found", 2),
        (["A,benign,a.png"], ["a.png"], "expected 4 fields", 2),
        (["A,benign,,"], [], "empty image_path", 2),
    ],
)
def test_row_errors(tmp_path, rows, files, pattern, row):
    path = _dataset(tmp_path, rows, files)
    with pytest.raises(ManifestError, match=pattern) as exc:
        load_manifest(path)
    assert exc.value.row == row


def test_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,label,path\n")
    with pytest.raises(ManifestError) as exc:
        load_manifest(path)
    assert exc.value.row == 1


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.csv")


def test_round_trip(small_phantom, tmp_path):
    path = small_phantom.root_dir / "manifest.csv"
    again = load_manifest(path)
    assert again == small_phantom
    # saving elsewhere rewrites paths relative to the new location
    out = tmp_path / "copy"
    out.mkdir()
    save_manifest(small_phantom, out / "m.csv")
    moved = load_manifest(out / "m.csv")
    assert [les.lesion_id for les in moved.lesions] == [les.lesion_id for les in small_phantom.lesions]
    assert [les.label for les in moved.lesions] == [les.label for les in small_phantom.lesions]
    for a, b in zip(moved.lesions, small_phantom.lesions):
        assert [moved.image_path(i).resolve() for i in a.images] == [
            small_phantom.image_path(i).resolve() for i in b.images
        ]


def test_empty_manifest_header_only(tmp_path):
    m = DatasetManifest((), tmp_path)
    save_manifest(m, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == HEADER
    assert load_manifest(tmp_path / "m.csv") == m


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        with pytest.raises(PermissionError):
            save_manifest(DatasetManifest((), ro), ro / "m.csv")
    finally:
        ro.chmod(0o700)


def test_unwritable_directory_reported(tmp_path, monkeypatch):
    # same check, independent of the user running the tests
    monkeypatch.setattr(os, "access", lambda p, mode: False)
    with pytest.raises(PermissionError, match="cannot write"):
        save_manifest(DatasetManifest((), tmp_path), tmp_path / "m.csv")


def test_record_invariants():
    ref = ImageRef("a", "a.png", 1, 1)
    with pytest.raises(ValueError):
        LesionRecord("L", LesionLabel.BENIGN, ())
    with pytest.raises(ValueError):
        LesionRecord("L", LesionLabel.BENIGN, (ref, ref))
    with pytest.raises(ValueError):
        ImageRef("a", "a.png", 0, 4)
    les = LesionRecord("L", LesionLabel.BENIGN, (ref,))
    with pytest.raises(ValueError, match="duplicate lesion_id"):
        DatasetManifest((les, les), ".")
