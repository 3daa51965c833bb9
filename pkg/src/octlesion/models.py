"""Backbone registry, pretrained checkpoints and the three training regimes.

SCR  random initialisation, everything trainable.
FT   pretrained backbone, everything trainable.
RC   pretrained backbone frozen (parameters and normalisation statistics);
     only the new two-output head trains.

Pretrained checkpoints are looked up in ``$OCTLESION_CHECKPOINT_DIR``
(default ``~/.cache/octlesion/checkpoints``) under the file name of their
published URL.  ``fetch_checkpoint`` downloads and hash-checks them.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torchvision
from safetensors.torch import load_file, save_file
from torch import nn

from .senet import SEResNeXt50

CHECKPOINT_ENV = "OCTLESION_CHECKPOINT_DIR"
INPUT_SIZE = 224


class BackboneId(str, Enum):
    RESNET18 = "resnet18-class"
    DENSENET121 = "densenet121-class"
    SE_RESNEXT50 = "se-resnext50-class"

    @property
    def display_name(self) -> str:
        return {
            BackboneId.RESNET18: "Resnet18",
            BackboneId.DENSENET121: "Densenet121",
            BackboneId.SE_RESNEXT50: "SE-Resnext50",
        }[self]


class Regime(str, Enum):
    SCR = "SCR"
    FT = "FT"
    RC = "RC"

    @property
    def pretrained(self) -> bool:
        return self is not Regime.SCR


class CheckpointUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class CheckpointInfo:
    url: str
    # leading hex digits of the file's sha256, as embedded in the published file name
    hash_prefix: str
    head_prefix: str

    @property
    def filename(self) -> str:
        return self.url.rsplit("/", 1)[-1]


CHECKPOINTS = {
    BackboneId.RESNET18: CheckpointInfo(
        "https://download.pytorch.org/models/resnet18-f37072fd.pth", "f37072fd", "fc."
    ),
    BackboneId.DENSENET121: CheckpointInfo(
        "https://download.pytorch.org/models/densenet121-a639ec97.pth", "a639ec97", "classifier."
    ),
    BackboneId.SE_RESNEXT50: CheckpointInfo(
        "http://data.lip6.fr/cadene/pretrainedmodels/se_resnext50_32x4d-a260b3a4.pth",
        "a260b3a4",
        "last_linear.",
    ),
}


def checkpoint_dir() -> Path:
    env = os.environ.get(CHECKPOINT_ENV)
    return Path(env) if env else Path.home() / ".cache" / "octlesion" / "checkpoints"


def checkpoint_path(backbone: BackboneId) -> Path:
    return checkpoint_dir() / CHECKPOINTS[BackboneId(backbone)].filename


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_checkpoint(backbone: BackboneId, progress: bool = True) -> Path:
    """Download the published checkpoint into the cache dir, verifying its hash prefix."""
    info = CHECKPOINTS[BackboneId(backbone)]
    dest = checkpoint_path(backbone)
    if dest.is_file():
        if not file_sha256(dest).startswith(info.hash_prefix):
            raise CheckpointUnavailable(f"{dest} does not match expected digest {info.hash_prefix}")
        return dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    try:
        torch.hub.download_url_to_file(info.url, str(dest), hash_prefix=info.hash_prefix, progress=progress)
    except Exception as exc:  # network errors come in many types
        raise CheckpointUnavailable(f"could not fetch {info.url}: {exc}") from exc
    return dest


def resolve_checkpoint(
    backbone: BackboneId, path: str | os.PathLike | None = None, sha256: str | None = None
) -> Path:
    """Locate a pretrained checkpoint: an explicit ``path`` or the cached published file."""
    backbone = BackboneId(backbone)
    if path is not None:
        found = Path(path)
        if not found.is_file():
            raise CheckpointUnavailable(f"checkpoint not found: {found}")
        if sha256 is not None and file_sha256(found) != sha256:
            raise CheckpointUnavailable(f"checkpoint {found} does not match sha256 {sha256}")
        return found
    found = checkpoint_path(backbone)
    if not found.is_file():
        raise CheckpointUnavailable(
            f"no pretrained weights for {backbone.value}: expected {found} "
            f"(run fetch_checkpoint or set {CHECKPOINT_ENV})"
        )
    return found


_DENSENET_KEY = re.compile(
    r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var|num_batches_tracked))$"
)


def _read_state(path: Path) -> dict[str, torch.Tensor]:
    if path.suffix == ".safetensors":
        return load_file(str(path))
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


def _backbone_state(backbone: BackboneId, state: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    head_prefix = CHECKPOINTS[backbone].head_prefix
    out = OrderedDict()
    for key, value in state.items():
        if key.startswith(head_prefix):
            continue
        if backbone is BackboneId.DENSENET121:
            # published file predates the current module names (norm.1 -> norm1)
            m = _DENSENET_KEY.match(key)
            if m:
                key = m.group(1) + m.group(2)
        out[key] = value
    return out


def make_backbone(backbone: BackboneId) -> tuple[nn.Module, int]:
    """Randomly initialised feature extractor and its feature width (uses the global torch RNG)."""
    backbone = BackboneId(backbone)
    if backbone is BackboneId.RESNET18:
        net = torchvision.models.resnet18(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
    elif backbone is BackboneId.DENSENET121:
        net = torchvision.models.densenet121(weights=None)
        dim = net.classifier.in_features
        net.classifier = nn.Identity()
    elif backbone is BackboneId.SE_RESNEXT50:
        net = SEResNeXt50()
        dim = net.feature_dim
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(backbone)
    return net, dim


def _published_keys(backbone: BackboneId, net: nn.Module) -> dict[str, torch.Tensor]:
    state = net.state_dict()
    if backbone is BackboneId.DENSENET121:
        renamed = OrderedDict()
        for key, value in state.items():
            m = re.match(r"^(.*denselayer\d+\.(?:norm|relu|conv))([12]\..*)$", key)
            renamed[m.group(1) + "." + m.group(2) if m else key] = value
        state = renamed
    return state


def _random_textures(n: int, rng: np.random.Generator, size: int = INPUT_SIZE) -> torch.Tensor:
    """Standardised Gaussian-smoothed noise at random scales, replicated to 3 channels."""
    from scipy.ndimage import gaussian_filter

    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        sigma = rng.uniform(0.5, 8.0, size=2)
        x = gaussian_filter(rng.standard_normal((size, size)), sigma)
        out[i] = (x - x.mean()) / (x.std() + 1e-12)
    return torch.from_numpy(out)


def write_surrogate_checkpoint(
    backbone: BackboneId, path: str | os.PathLike, seed: int = 20190101,
    n_calibration: int = 200, batch_size: int = 25,
) -> Path:
    """Write a stand-in for the published checkpoint, in the same file layout.

    Weights are a seeded random initialisation.  Batch-norm running
    statistics are then estimated on ``n_calibration`` label-free random
    texture images, so the frozen network produces standardised activations
    like a trained one does.  No dataset images or labels are involved.

    Only meant for environments without access to the published ImageNet
    weights: FT/RC run unchanged, but their "pretrained" features are random
    convolutional features.
    """
    backbone = BackboneId(backbone)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net, dim = make_backbone(backbone)
        head = nn.Linear(dim, 1000)
    bns = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative average over all calibration batches
    rng = np.random.default_rng(seed)
    net.train()
    with torch.no_grad():
        for start in range(0, n_calibration, batch_size):
            net(_random_textures(min(batch_size, n_calibration - start), rng))
    for bn in bns:
        bn.momentum = 0.1
    net.eval()

    state = _published_keys(backbone, net)
    prefix = CHECKPOINTS[backbone].head_prefix
    state[prefix + "weight"] = head.weight.detach()
    state[prefix + "bias"] = head.bias.detach()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".safetensors":
        save_file({k: v.contiguous() for k, v in state.items()}, str(path))
    else:
        torch.save(state, path)
    return path


class ClassifierModel(nn.Module):
    """Backbone feature extractor followed by dropout and a 2-logit affine head."""

    def __init__(self, backbone_id: BackboneId, regime: Regime, backbone: nn.Module, feature_dim: int,
                 dropout_p: float = 0.2, seed: int = 0):
        super().__init__()
        self.backbone_id = BackboneId(backbone_id)
        self.regime = Regime(regime)
        self.feature_dim = feature_dim
        self.dropout_p = dropout_p
        self.seed = seed
        self.input_size = INPUT_SIZE
        self.backbone = backbone
        self.head = nn.Sequential(
            OrderedDict(dropout=nn.Dropout(dropout_p), fc=nn.Linear(feature_dim, 2))
        )
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / np.sqrt(feature_dim)
        with torch.no_grad():
            self.head.fc.weight.uniform_(-bound, bound, generator=gen)
            self.head.fc.bias.uniform_(-bound, bound, generator=gen)
        if self.regime is Regime.RC:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.regime is Regime.RC:
            # frozen backbone keeps its normalisation statistics
            self.backbone.eval()
        return self

    @property
    def backbone_frozen(self) -> bool:
        return self.regime is Regime.RC

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def trainable_mask(self) -> dict[str, bool]:
        return {name: p.requires_grad for name, p in self.named_parameters()}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def metadata(self) -> dict:
        return {
            "backbone": self.backbone_id.value,
            "regime": self.regime.value,
            "feature_dim": self.feature_dim,
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }


def build_model(
    backbone: BackboneId | str,
    regime: Regime | str,
    dropout_p: float = 0.2,
    seed: int = 0,
    checkpoint: str | os.PathLike | None = None,
    checkpoint_sha256: str | None = None,
) -> ClassifierModel:
    try:
        backbone = BackboneId(backbone)
    except ValueError:
        raise ValueError(
            f"unknown backbone {backbone!r}; choose from {[b.value for b in BackboneId]}"
        ) from None
    regime = Regime(regime)
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must be in [0, 1)")
    path = resolve_checkpoint(backbone, checkpoint, checkpoint_sha256) if regime.pretrained else None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net, dim = make_backbone(backbone)
    if path is not None:
        net.load_state_dict(_backbone_state(backbone, _read_state(path)), strict=True)
    return ClassifierModel(backbone, regime, net, dim, dropout_p, seed)


def forward(model: ClassifierModel, batch: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
    """B x 3 x S x S input -> B x 2 logits; dropout only when ``train_mode``."""
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (model.input_size, model.input_size):
        raise ValueError(
            f"expected input of shape B x 3 x {model.input_size} x {model.input_size}, "
            f"got {tuple(batch.shape)}"
        )
    model.train(train_mode)
    if train_mode:
        return model(batch)
    with torch.no_grad():
        return model(batch)


def parameter_digest(model: ClassifierModel, scope: str = "all", include_buffers: bool = False) -> str:
    """sha256 over names, dtypes, shapes and raw bytes of the parameters in ``scope``.

    Buffers (batch-norm running statistics) are left out unless
    ``include_buffers``: they move in train mode even when no step is taken.
    """
    if scope not in ("backbone", "head", "all"):
        raise ValueError("scope must be backbone, head or all")
    tensors = dict(model.named_parameters())
    if include_buffers:
        tensors.update(model.named_buffers())
    h = hashlib.sha256()
    for name, tensor in sorted(tensors.items()):
        if scope != "all" and not name.startswith(scope + "."):
            continue
        arr = tensor.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_model(model: ClassifierModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write parameters to ``path`` (safetensors) and metadata to ``path`` + ``.json``."""
    path = Path(path)
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, str(path))
    meta = model.metadata()
    meta.update(extra or {})
    meta["digest"] = parameter_digest(model, include_buffers=True)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path: str | os.PathLike) -> ClassifierModel:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    with torch.random.fork_rng(devices=[]):
        net, dim = make_backbone(BackboneId(meta["backbone"]))
    model = ClassifierModel(meta["backbone"], meta["regime"], net, dim, meta["dropout_p"], meta["seed"])
    model.load_state_dict(load_file(str(path)), strict=True)
    return model
