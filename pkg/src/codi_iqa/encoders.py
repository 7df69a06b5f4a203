"""Content- and distortion-aware encoders with multi-stage feature taps.

Backbones are treated as opaque modules; stage outputs are tapped with
torchvision's FX feature extractor, so any backbone whose stage table is
registered in ``BACKBONES`` can be slotted in.
"""
import hashlib
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn
from torchvision.models.feature_extraction import create_feature_extractor

from .errors import CheckpointError, ConfigurationError, InputError, ProvenanceError

FORMAT_VERSION = 1

PRETRAINED_CONTENT = "pretrained-content"
PRETRAINED_DISTORTION = "pretrained-distortion"
RANDOM_SEEDED = "random-seeded"
PROVENANCES = (PRETRAINED_CONTENT, PRETRAINED_DISTORTION, RANDOM_SEEDED)

SLOT_PROVENANCE = {"CAE": PRETRAINED_CONTENT, "DAE": PRETRAINED_DISTORTION}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

NORM_TYPES = (nn.modules.batchnorm._BatchNorm, nn.LayerNorm, nn.GroupNorm)


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels: int
    downscale: int


@dataclass(frozen=True)
class Normalization:
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


class TinyBackbone(nn.Module):
    """Five stride-2 conv stages with the residual-CNN downscale schedule.

    Used for desk-scale tests; every shape invariant of the full backbone
    holds here at a fraction of the capacity.
    """

    def __init__(self, channels=(4, 8, 16, 32, 64), norm=True, act=True):
        super().__init__()
        layers = []
        c_in = 3
        for c in channels:
            block = [nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=not norm)]
            if norm:
                block.append(nn.BatchNorm2d(c))
            if act:
                block.append(nn.ReLU())
            layers.append(nn.Sequential(*block))
            c_in = c
        self.stage0, self.stage1, self.stage2, self.stage3, self.stage4 = layers

    def forward(self, x):
        for stage in (self.stage0, self.stage1, self.stage2, self.stage3, self.stage4):
            x = stage(x)
        return x


class TinyHierarchical(nn.Module):
    """Four-stage patchify backbone with the transformer stage schedule (4..32)."""

    def __init__(self, channels=(8, 16, 32, 64)):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(3, channels[0], 4, stride=4), nn.GroupNorm(1, channels[0]), nn.GELU())
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks.append(nn.Sequential(nn.Conv2d(c_in, c_out, 2, stride=2), nn.GroupNorm(1, c_out), nn.GELU()))
        self.stage2, self.stage3, self.stage4 = blocks

    def forward(self, x):
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            x = stage(x)
        return x


def _resnet50():
    from torchvision.models import resnet50

    return resnet50()


def _swin_b():
    from torchvision.models import swin_b

    return swin_b()


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    build: Callable[[], nn.Module]
    stages: Tuple[StageSpec, ...]
    nodes: Dict[int, str]
    channels_last: bool = False

    def stage(self, index):
        for s in self.stages:
            if s.index == index:
                return s
        raise ConfigurationError(f"backbone {self.name!r} has no stage {index}")


BACKBONES: Dict[str, BackboneSpec] = {
    "resnet50": BackboneSpec(
        "resnet50",
        _resnet50,
        tuple(StageSpec(i, c, 2 ** (i + 1)) for i, c in enumerate((64, 256, 512, 1024, 2048))),
        {0: "relu", 1: "layer1", 2: "layer2", 3: "layer3", 4: "layer4"},
    ),
    "swin_b": BackboneSpec(
        "swin_b",
        _swin_b,
        tuple(StageSpec(i, c, 2 ** (i + 1)) for i, c in zip(range(1, 5), (128, 256, 512, 1024))),
        {1: "features.1", 2: "features.3", 3: "features.5", 4: "features.7"},
        channels_last=True,
    ),
    "tiny": BackboneSpec(
        "tiny",
        TinyBackbone,
        tuple(StageSpec(i, c, 2 ** (i + 1)) for i, c in enumerate((4, 8, 16, 32, 64))),
        {i: f"stage{i}" for i in range(5)},
    ),
    "tiny_hierarchical": BackboneSpec(
        "tiny_hierarchical",
        TinyHierarchical,
        tuple(StageSpec(i, c, 2 ** (i + 1)) for i, c in zip(range(1, 5), (8, 16, 32, 64))),
        {i: f"stage{i}" for i in range(1, 5)},
    ),
}


def backbone_spec(name) -> BackboneSpec:
    try:
        return BACKBONES[name]
    except KeyError:
        raise ConfigurationError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}") from None


@dataclass
class FeaturePyramid:
    stages: List[Tuple[StageSpec, torch.Tensor]]
    source: str  # "CAE" or "DAE"

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    @property
    def specs(self):
        return [s for s, _ in self.stages]

    @property
    def features(self):
        return [f for _, f in self.stages]

    def shapes(self):
        return [tuple(f.shape[-3:]) for _, f in self.stages]


@dataclass
class BackboneParams:
    state_dict: Dict[str, torch.Tensor]
    provenance: str
    backbone_id: str
    normalization: Normalization = field(default_factory=Normalization)
    format_version: int = FORMAT_VERSION
    seed: Optional[int] = None

    def manifest(self):
        return {
            "format_version": self.format_version,
            "provenance": self.provenance,
            "backbone_id": self.backbone_id,
            "normalization": self.normalization.to_dict(),
            "seed": self.seed,
        }

    def digest(self):
        h = hashlib.sha256()
        for k in sorted(self.state_dict):
            h.update(k.encode())
            h.update(self.state_dict[k].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class Encoder(nn.Module):
    """One backbone with its stage taps and input normalization.

    ``role`` is ``"CAE"`` or ``"DAE"``; it only decides which pretrained
    provenance the slot accepts.
    """

    def __init__(self, backbone="resnet50", role="CAE", stages: Optional[Sequence[int]] = None,
                 normalization: Optional[Normalization] = None):
        super().__init__()
        if role not in SLOT_PROVENANCE:
            raise ConfigurationError(f"role must be CAE or DAE, got {role!r}")
        self.spec = backbone_spec(backbone)
        self.role = role
        all_idx = [s.index for s in self.spec.stages]
        stages = sorted(all_idx if stages is None else stages)
        for i in stages:
            self.spec.stage(i)
        self.stage_specs = tuple(self.spec.stage(i) for i in stages)
        nodes = {self.spec.nodes[s.index]: str(s.index) for s in self.stage_specs}
        self.body = create_feature_extractor(self.spec.build(), return_nodes=nodes)
        self.normalization = normalization or Normalization()
        self.register_buffer("mean", torch.tensor(self.normalization.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.normalization.std).view(1, 3, 1, 1), persistent=False)

    @property
    def backbone_id(self):
        return self.spec.name

    def norm_modules(self):
        return [m for m in self.body.modules() if isinstance(m, NORM_TYPES)]

    def forward(self, x) -> List[torch.Tensor]:
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = self.body(x)
        feats = [out[str(s.index)] for s in self.stage_specs]
        if self.spec.channels_last:
            feats = [f.permute(0, 3, 1, 2).contiguous() for f in feats]
        return feats

    def pyramid(self, x) -> FeaturePyramid:
        return FeaturePyramid(list(zip(self.stage_specs, self(x))), self.role)

    def load_params(self, params: BackboneParams):
        if params.backbone_id != self.spec.name:
            raise ConfigurationError(
                f"params are for backbone {params.backbone_id!r}, encoder is {self.spec.name!r}"
            )
        if params.provenance not in (SLOT_PROVENANCE[self.role], RANDOM_SEEDED):
            raise ProvenanceError(f"{params.provenance} weights cannot be loaded into the {self.role} slot")
        own = self.body.state_dict()
        state = {k: v for k, v in params.state_dict.items() if k in own}
        missing = sorted(set(own) - set(state))
        if missing:
            raise ConfigurationError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
        bad = [k for k in state if tuple(state[k].shape) != tuple(own[k].shape)]
        if bad:
            k = bad[0]
            raise ConfigurationError(
                f"shape mismatch for {k}: checkpoint {tuple(state[k].shape)} vs backbone {tuple(own[k].shape)}"
            )
        self.body.load_state_dict(state)
        self.normalization = params.normalization
        self.mean.copy_(torch.tensor(params.normalization.mean).view(1, 3, 1, 1))
        self.std.copy_(torch.tensor(params.normalization.std).view(1, 3, 1, 1))
        return self


def _check_image(image):
    if not torch.is_tensor(image):
        raise InputError("image must be a tensor")
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise InputError(f"expected 3xHxW or Bx3xHxW, got {tuple(image.shape)}")
    if min(image.shape[-2:]) < 32:
        raise InputError(f"image sides must be at least 32 pixels, got {tuple(image.shape[-2:])}")
    if not torch.isfinite(image).all():
        raise InputError("image contains non-finite values")
    return image


def _extract(image, params: BackboneParams, role, stages=None):
    image = _check_image(image)
    enc = Encoder(params.backbone_id, role, stages=stages).load_params(params)
    enc.eval()
    with torch.no_grad():
        return enc.to(image.dtype).pyramid(image)


def extract_content_pyramid(image, params: BackboneParams, stages=None) -> FeaturePyramid:
    """Stage features of the content-aware encoder for one image or a batch."""
    return _extract(image, params, "CAE", stages)


def extract_distortion_pyramid(image, params: BackboneParams, stages=None) -> FeaturePyramid:
    """Stage features of the distortion-aware encoder for one image or a batch."""
    return _extract(image, params, "DAE", stages)


_RANDOM_RE = re.compile(r"^random:seed=(\d+)$")


def random_backbone_params(backbone_id, seed, normalization=None) -> BackboneParams:
    spec = backbone_spec(backbone_id)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = spec.build()
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return BackboneParams(state, RANDOM_SEEDED, backbone_id, normalization or Normalization(), seed=seed)


def save_backbone_weights(params: BackboneParams, path):
    """Write params in the checkpoint container (manifest + tensors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"manifest": {"kind": "backbone", **params.manifest()}, "state_dict": params.state_dict}, path)
    return path


def pack_backbone_weights(state_dict, path, provenance, backbone_id, normalization=None):
    """Wrap a raw backbone state dict (e.g. torchvision weights) into a container file."""
    if provenance not in PROVENANCES:
        raise ProvenanceError(f"unknown provenance {provenance!r}")
    backbone_spec(backbone_id)
    params = BackboneParams(dict(state_dict), provenance, backbone_id, normalization or Normalization())
    return save_backbone_weights(params, path)


def read_container(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        blob = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "manifest" not in blob or "state_dict" not in blob:
        raise CheckpointError(f"{path} is not a checkpoint container")
    version = blob["manifest"].get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format_version {version}, expected {FORMAT_VERSION}")
    return blob


def load_backbone_weights(source, expected_provenance, backbone_id="resnet50") -> BackboneParams:
    """Load backbone params from a container file or ``random:seed=N``.

    Random sources synthesize weights for ``backbone_id`` and are accepted
    for either slot; file sources must carry ``expected_provenance``.
    """
    if expected_provenance not in PROVENANCES:
        raise ProvenanceError(f"unknown provenance {expected_provenance!r}")
    m = _RANDOM_RE.match(str(source))
    if m:
        return random_backbone_params(backbone_id, int(m.group(1)))
    if str(source).startswith("random:"):
        raise CheckpointError(f"malformed random source {source!r}; use random:seed=N")
    blob = read_container(source)
    man = blob["manifest"]
    if man.get("kind", "backbone") != "backbone":
        raise CheckpointError(f"{source} holds a {man.get('kind')} checkpoint, not backbone weights")
    if man.get("provenance") != expected_provenance:
        raise ProvenanceError(f"{source} is tagged {man.get('provenance')!r}, expected {expected_provenance!r}")
    backbone_spec(man["backbone_id"])
    return BackboneParams(
        dict(blob["state_dict"]),
        man["provenance"],
        man["backbone_id"],
        Normalization.from_dict(man["normalization"]),
        format_version=man["format_version"],
        seed=man.get("seed"),
    )
