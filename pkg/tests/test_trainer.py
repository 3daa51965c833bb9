import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from octlesion.dataset import LesionLabel, load_manifest
from octlesion.models import Regime, build_model, parameter_digest
from octlesion.phantom import PhantomParams, generate_dataset
from octlesion.pipeline import AugmentSpec, PreprocessSpec
from octlesion.splits import Fold, make_splits
from octlesion.trainer import (
    FeatureBank,
    ImageStore,
    TrainConfig,
    TrainHistory,
    TrainingDiverged,
    class_weights,
    resolve_preprocess,
    train_fold,
    weighted_ce_grad,
    weighted_ce_loss,
)

GEOMETRIC_ONLY = AugmentSpec(brightness_delta=0.0, contrast_delta=0.0, saturation_delta=0.0)


# loss and weights -----------------------------------------------------------

@pytest.mark.parametrize(
    "benign, invasive, expected",
    [(91, 9, (0.09, 0.91)), (10, 10, (0.5, 0.5)), (3, 1, (0.25, 0.75))],
)
def test_class_weight_examples(benign, invasive, expected):
    w = class_weights({LesionLabel.BENIGN: benign, "invasive": invasive})
    assert np.allclose(w, expected, rtol=0, atol=1e-9)


@given(st.integers(1, 10**6), st.integers(1, 10**6))
def test_class_weights_inverse_frequency(nb, ni):
    w = class_weights({"benign": nb, "invasive": ni})
    inv = np.array([1 / nb, 1 / ni])
    assert np.allclose(w, inv / inv.sum(), rtol=0, atol=1e-12)
    assert abs(w.sum() - 1) < 1e-12


def test_class_weights_need_both():
    with pytest.raises(ValueError):
        class_weights({"benign": 5, "invasive": 0})
    with pytest.raises(ValueError):
        class_weights({"benign": 5})


def test_loss_examples():
    zeros = torch.zeros(4, 2, dtype=torch.float64)
    assert weighted_ce_loss(zeros, [0, 1, 1, 0], (0.5, 0.5)).item() == pytest.approx(math.log(2), abs=1e-12)
    logits = torch.tensor([[0.0, math.log(4.0)]], dtype=torch.float64)  # softmax (0.2, 0.8)
    assert weighted_ce_loss(logits, [1], (0.09, 0.91)).item() == pytest.approx(-math.log(0.8), abs=1e-12)
    two = torch.zeros(2, 2, dtype=torch.float64)
    assert weighted_ce_loss(two, [0, 1], (0.09, 0.91)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        weighted_ce_loss(torch.zeros(2, 2), [0, 2], (0.5, 0.5))
    with pytest.raises(ValueError):
        weighted_ce_loss(torch.zeros(3, 2), [0, 1], (0.5, 0.5))


def test_equal_weights_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = torch.from_numpy(rng.normal(0, 3, (5, 2)))
        y = torch.from_numpy(rng.integers(0, 2, 5))
        assert abs(weighted_ce_loss(z, y, (0.5, 0.5)).item() - F.cross_entropy(z, y).item()) < 1e-9


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    worst = 0.0
    for _ in range(50):
        z = rng.normal(0, 2, (5, 2))
        y = rng.integers(0, 2, 5)
        w = rng.dirichlet([1, 1])
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            up, down = z.copy(), z.copy()
            up[idx] += h
            down[idx] -= h
            f_up = weighted_ce_loss(torch.from_numpy(up), y, w).item()
            f_down = weighted_ce_loss(torch.from_numpy(down), y, w).item()
            fd[idx] = (f_up - f_down) / (2 * h)
        zt = torch.from_numpy(z).requires_grad_(True)
        weighted_ce_loss(zt, y, w).backward()
        worst = max(worst, np.abs(weighted_ce_grad(z, y, w) - fd).max(), np.abs(zt.grad.numpy() - fd).max())
    assert worst < 1e-4


def test_train_config_validation():
    TrainConfig(class_weights=(0.09, 0.91)).validate()
    for bad in (
        TrainConfig(class_weights=(0.5, 0.6)),
        TrainConfig(class_weights=(0.0, 1.0)),
        TrainConfig(batch_size=0),
        TrainConfig(learning_rate=-1),
        TrainConfig(beta1=1.0),
    ):
        with pytest.raises(ValueError):
            bad.validate()
    assert TrainConfig().learning_rate == 1e-5 and TrainConfig().batch_size == 5


# training loop ----------------------------------------------------------------

@pytest.fixture
def small_fold(small_phantom):
    return make_splits(small_phantom, n_val_common=3, seed=0).folds[0]


def _digests(model):
    return {s: parameter_digest(model, s, include_buffers=True) for s in ("backbone", "head")}


def test_rc_backbone_frozen_and_history(weights_env, small_phantom, small_fold):
    model = build_model("resnet18-class", Regime.RC, seed=1)
    before = _digests(model)
    cfg = TrainConfig(learning_rate=1e-2, epochs=3, seed=2)
    model, hist = train_fold(model, small_phantom, small_fold, cfg, PreprocessSpec(), GEOMETRIC_ONLY)
    after = _digests(model)
    assert after["backbone"] == before["backbone"]
    assert after["head"] != before["head"]
    n_imgs = sum(len(small_phantom.by_id()[i].images) for i in small_fold.train)
    assert len(hist.epoch_losses) == 3 and hist.n_train_images == n_imgs
    assert hist.steps == 3 * math.ceil(n_imgs / 5)  # final partial batch kept
    assert hist.final_digests == {"backbone": parameter_digest(model, "backbone"), "head": parameter_digest(model, "head")}
    invasive_imgs = sum(
        len(small_phantom.by_id()[i].images) for i in small_fold.train
        if small_phantom.by_id()[i].label is LesionLabel.INVASIVE
    )
    assert hist.class_weights == pytest.approx((invasive_imgs / n_imgs, 1 - invasive_imgs / n_imgs))


@pytest.mark.parametrize("regime", [Regime.RC, Regime.FT])
def test_zero_learning_rate_changes_nothing(weights_env, small_phantom, small_fold, regime):
    model = build_model("resnet18-class", regime, seed=1)
    before = {s: parameter_digest(model, s) for s in ("backbone", "head")}
    cfg = TrainConfig(learning_rate=0.0, epochs=2 if regime is Regime.RC else 1)
    model, hist = train_fold(model, small_phantom, small_fold, cfg, PreprocessSpec(), GEOMETRIC_ONLY)
    assert {s: parameter_digest(model, s) for s in ("backbone", "head")} == before
    assert len(hist.epoch_losses) == cfg.epochs


def test_rc_loss_decreases_on_easy_images(weights_env, tmp_path):
    m = generate_dataset(PhantomParams(bm_brightness=0.9, speckle_scale=0.0, images_per_lesion=1, seed=4), 7, 3, tmp_path)
    benign = m.ids_with_label(LesionLabel.BENIGN)
    invasive = m.ids_with_label(LesionLabel.INVASIVE)
    fold = Fold(0, invasive[0], (benign[0],), tuple(benign[1:] + invasive[1:]))
    assert len(fold.train) == 8
    model = build_model("resnet18-class", Regime.RC, seed=0)
    _, hist = train_fold(model, m, fold, TrainConfig(learning_rate=1e-3, epochs=30), PreprocessSpec(), GEOMETRIC_ONLY)
    assert hist.epoch_losses[-1] < hist.epoch_losses[0]


def test_training_is_deterministic(weights_env, small_phantom, small_fold):
    def once():
        model = build_model("resnet18-class", Regime.FT, seed=3)
        cfg = TrainConfig(learning_rate=1e-4, epochs=1, seed=5)
        return train_fold(model, small_phantom, small_fold, cfg, PreprocessSpec(), AugmentSpec())[1]

    a, b = once(), once()
    assert a == b
    assert a.final_digests["backbone"] == b.final_digests["backbone"]


def test_validation_images_never_read(weights_env, small_phantom, small_fold):
    store = ImageStore(small_phantom)
    model = build_model("resnet18-class", Regime.SCR, seed=0)
    pre = resolve_preprocess(PreprocessSpec(normalization="dataset_stats"), small_phantom, small_fold.train, store)
    train_fold(model, small_phantom, small_fold, TrainConfig(epochs=1), pre, AugmentSpec(), store)
    lesions = small_phantom.by_id()
    val_paths = {str(small_phantom.image_path(im)) for lid in small_fold.validation for im in lesions[lid].images}
    train_paths = {str(small_phantom.image_path(im)) for lid in small_fold.train for im in lesions[lid].images}
    assert store.accessed == train_paths
    assert not store.accessed & val_paths


def test_dataset_stats_come_from_training_lesions(small_phantom, small_fold):
    pre = resolve_preprocess(PreprocessSpec(normalization="dataset_stats"), small_phantom, small_fold.train)
    assert pre.resolved and 0 < pre.dataset_mean < 1 and pre.dataset_std > 0
    assert resolve_preprocess(PreprocessSpec(), small_phantom, small_fold.train) == PreprocessSpec()
    with pytest.raises(ValueError, match="resolved"):
        train_fold(None, small_phantom, small_fold, TrainConfig(), PreprocessSpec(normalization="dataset_stats"), AugmentSpec())


def test_feature_cache_matches_direct_path(weights_env, small_phantom, small_fold):
    cfg = TrainConfig(learning_rate=1e-2, epochs=2, seed=7)
    bank = FeatureBank()
    cached = train_fold(build_model("resnet18-class", Regime.RC, seed=1), small_phantom, small_fold,
                        cfg, PreprocessSpec(), GEOMETRIC_ONLY, feature_bank=bank)
    direct = train_fold(build_model("resnet18-class", Regime.RC, seed=1), small_phantom, small_fold,
                        replace(cfg, feature_cache=False), PreprocessSpec(), GEOMETRIC_ONLY)
    assert len(bank) > 0
    assert np.allclose(cached[1].epoch_losses, direct[1].epoch_losses, rtol=0, atol=1e-5)
    assert torch.allclose(cached[0].head.fc.weight, direct[0].head.fc.weight, atol=1e-5)


def test_non_finite_loss_aborts_with_dump(weights_env, small_phantom, small_fold, tmp_path):
    model = build_model("resnet18-class", Regime.RC)
    with torch.no_grad():
        model.head.fc.weight.fill_(float("nan"))
    dump = tmp_path / "dump.json"
    with pytest.raises(TrainingDiverged) as exc:
        train_fold(model, small_phantom, small_fold, TrainConfig(epochs=1), PreprocessSpec(), GEOMETRIC_ONLY,
                   dump_path=dump, context={"config_digest": "d1"})
    assert exc.value.epoch == 0 and exc.value.step == 0 and exc.value.lesion_ids
    info = json.loads(dump.read_text())
    assert info["config_digest"] == "d1" and info["lesion_ids"] == exc.value.lesion_ids


def test_bad_folds_rejected(weights_env, small_phantom, small_fold):
    model = build_model("resnet18-class", Regime.RC)
    run = lambda fold: train_fold(model, small_phantom, fold, TrainConfig(epochs=1), PreprocessSpec(), GEOMETRIC_ONLY)  # noqa: E731
    with pytest.raises(ValueError, match="no training images"):
        run(replace(small_fold, train=()))
    with pytest.raises(ValueError, match="unknown"):
        run(replace(small_fold, train=small_fold.train + ("nope",)))
    with pytest.raises(ValueError, match="validation lesions"):
        run(replace(small_fold, train=small_fold.train + (small_fold.val_rare,)))


def test_history_round_trip(tmp_path):
    h = TrainHistory([0.5, 0.25], 4, {"head": "x"}, (0.1, 0.9), 20)
    h.save(tmp_path / "h.json")
    assert TrainHistory.from_dict(json.loads((tmp_path / "h.json").read_text())) == h


def test_manifest_images_exist(small_phantom):
    # sanity for the shared fixture
    again = load_manifest(small_phantom.root_dir / "manifest.csv")
    assert again.counts[LesionLabel.INVASIVE] == 3
