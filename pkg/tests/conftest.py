from __future__ import annotations

from pathlib import Path

import pytest

from octlesion.dataset import load_manifest
from octlesion.models import CHECKPOINT_ENV, CHECKPOINTS, BackboneId, write_surrogate_checkpoint
from octlesion.phantom import PhantomParams, generate_dataset


@pytest.fixture(scope="session")
def checkpoint_cache(tmp_path_factory) -> Path:
    """Offline stand-in weights for the 18-layer backbone, laid out like the published file."""
    d = tmp_path_factory.mktemp("checkpoints")
    write_surrogate_checkpoint(BackboneId.RESNET18, d / CHECKPOINTS[BackboneId.RESNET18].filename)
    return d


@pytest.fixture
def weights_env(checkpoint_cache, monkeypatch) -> Path:
    monkeypatch.setenv(CHECKPOINT_ENV, str(checkpoint_cache))
    return checkpoint_cache


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    """20 benign + 3 invasive lesions, 2 images each, low noise."""
    d = tmp_path_factory.mktemp("small_phantom")
    params = PhantomParams(bm_brightness=0.9, speckle_scale=0.1, images_per_lesion=2, seed=5)
    generate_dataset(params, 20, 3, d)
    return load_manifest(d / "manifest.csv")
