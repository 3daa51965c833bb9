import json
import subprocess
import sys

import pytest
import yaml

from octlesion import __version__, cli
from octlesion.cli import main
from octlesion.splits import load_plan
from octlesion.trainer import TrainingDiverged


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["phantom", "--benign", "8", "--invasive", "3", "--images-per-lesion", "1",
                 "--bm-brightness", "0.9", "--speckle-scale", "0.1", "--seed", "3", "--out", str(d)]) == 0
    return d


def _config(path, manifest, **extra):
    data = {
        "manifest_path": str(manifest),
        "train": {"epochs": 1, "learning_rate": 1e-2},
        "augment": {"brightness_delta": 0.0, "contrast_delta": 0.0, "saturation_delta": 0.0},
        "split": {"n_val_common": 3},
        "output_dir": "out",
    }
    data.update(extra)
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "octlesion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("phantom", "split", "run", "matrix", "report", "fetch-weights"):
        assert cmd in out.stdout


def test_phantom_output_is_byte_identical(tmp_path, capsys):
    args = ["phantom", "--benign", "3", "--invasive", "2", "--images-per-lesion", "2", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert "5 lesions (3 benign, 2 invasive), 10 images" in capsys.readouterr().out
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 12
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_phantom_bad_params(tmp_path):
    assert main(["phantom", "--bm-brightness", "2", "--out", str(tmp_path / "x")]) == 2


def test_split_command(cli_data, tmp_path, capsys):
    out = tmp_path / "plan.json"
    assert main(["split", "--manifest", str(cli_data / "manifest.csv"), "--val-common", "3", "--out", str(out)]) == 0
    assert len(load_plan(out)) == 2
    assert main(["split", "--manifest", str(cli_data / "manifest.csv"), "--val-common", "3", "--folds", "1",
                 "--out", str(out)]) == 0
    assert len(load_plan(out)) == 1
    assert "1 folds" in capsys.readouterr().out
    assert main(["split", "--manifest", str(cli_data / "manifest.csv")]) == 3  # 9 common per fold is too many
    assert main(["split", "--manifest", str(tmp_path / "nope.csv")]) == 3


def test_run_and_report(weights_env, cli_data, tmp_path, capsys):
    cfg = _config(tmp_path / "c.yaml", cli_data / "manifest.csv")
    assert main(["run", cfg]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1].startswith("Resnet18 RC  ")
    assert (tmp_path / "out" / "metrics.json").is_file()
    assert main(["report", str(tmp_path / "out"), "--human", "--f1", "invasive", "--out", str(tmp_path / "rep")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[-1] == "Human Rater  -  81.50  72.50  -"
    assert json.loads((tmp_path / "rep" / "report.json").read_text())["f1_column"] == "invasive"
    # same directory, different config
    changed = _config(tmp_path / "c2.yaml", cli_data / "manifest.csv", global_seed=4)
    assert main(["run", changed]) == 6
    assert main(["report", str(tmp_path / "missing")]) == 3


@pytest.mark.parametrize(
    "content, code",
    [("manifest_path: m.csv\nbackbone: vgg16\n", 2), ("manifest_path: [unclosed\n", 2), ("manifest_path: nope.csv\n", 3)],
)
def test_run_error_codes(tmp_path, content, code):
    (tmp_path / "c.yaml").write_text(content)
    assert main(["run", str(tmp_path / "c.yaml")]) == code


def test_missing_weights_exit_code(cli_data, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OCTLESION_CHECKPOINT_DIR", str(tmp_path / "empty"))
    cfg = _config(tmp_path / "c.yaml", cli_data / "manifest.csv", regime="FT")
    assert main(["run", cfg]) == 4
    assert "OCTLESION_CHECKPOINT_DIR" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch, cli_data):
    def diverge(cfg, jobs=1):
        raise TrainingDiverged("loss is nan", 0, 0, ["L000"])

    monkeypatch.setattr(cli, "run", diverge)
    assert main(["run", _config(tmp_path / "c.yaml", cli_data / "manifest.csv")]) == 5


def test_matrix_with_failed_cell(cli_data, tmp_path, monkeypatch):
    monkeypatch.setenv("OCTLESION_CHECKPOINT_DIR", str(tmp_path / "empty"))
    (tmp_path / "m.yaml").write_text(yaml.safe_dump({
        "backbones": ["resnet18-class"],
        "regimes": ["FT"],
        "shared": {"manifest_path": str(cli_data / "manifest.csv"), "split": {"n_val_common": 3}},
        "output_dir": "grid",
    }))
    assert main(["matrix", str(tmp_path / "m.yaml")]) == 1
    assert "FAILED" in (tmp_path / "grid" / "report.txt").read_text()
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"backbones": ["vgg"], "shared": {"manifest_path": "m"}}))
    assert main(["matrix", str(tmp_path / "bad.yaml")]) == 2


def test_fetch_weights_surrogate(tmp_path, monkeypatch, capsys):
    written = []

    def fake(backbone, path, **kwargs):
        written.append((backbone.value, path.name))
        return path

    monkeypatch.setattr(cli, "write_surrogate_checkpoint", fake)
    assert main(["fetch-weights", "--surrogate", "--backbone", "resnet18-class", "--dir", str(tmp_path)]) == 0
    assert written == [("resnet18-class", "resnet18-f37072fd.pth")]
    assert f"OCTLESION_CHECKPOINT_DIR={tmp_path}" in capsys.readouterr().out
