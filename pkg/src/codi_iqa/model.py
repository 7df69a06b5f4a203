"""Full model: two encoders, per-stage interaction blocks, patch-weighted head."""
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

from torch import nn

from .encoders import BackboneParams, Encoder, Normalization, backbone_spec
from .errors import ConfigurationError
from .head import PatchWeightedHead, fuse_pyramid
from .ppim import PPIM, InteractionCore, StageInteractionConfig


@dataclass
class ModelConfig:
    content_backbone: str = "resnet50"
    distortion_backbone: str = "resnet50"
    dim: int = 384
    squeeze: int = 64
    gate_dim: int = 64
    kernel: int = 3
    stages: Optional[Tuple[int, ...]] = None
    coarse: bool = True
    fine: bool = True
    split: bool = True
    offsets_from: str = "distortion"
    shared_ppim: bool = False
    head_hidden_ratio: int = 2
    pooling: str = "patch-weighted"
    content_normalization: Normalization = field(default_factory=Normalization)
    distortion_normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        if self.stages is not None:
            self.stages = tuple(sorted(int(s) for s in self.stages))
        if isinstance(self.content_normalization, dict):
            self.content_normalization = Normalization.from_dict(self.content_normalization)
        if isinstance(self.distortion_normalization, dict):
            self.distortion_normalization = Normalization.from_dict(self.distortion_normalization)

    def resolved_stages(self):
        cae = {s.index for s in backbone_spec(self.content_backbone).stages}
        dae = {s.index for s in backbone_spec(self.distortion_backbone).stages}
        common = sorted(cae & dae)
        if self.stages is None:
            return tuple(common)
        bad = [s for s in self.stages if s not in common]
        if bad or not self.stages:
            raise ConfigurationError(f"stages {list(self.stages)} not available; choose from {common}")
        return self.stages

    def to_dict(self):
        d = asdict(self)
        d["stages"] = list(self.stages) if self.stages is not None else None
        d["content_normalization"] = self.content_normalization.to_dict()
        d["distortion_normalization"] = self.distortion_normalization.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale configuration on the tiny backbone."""
        base = dict(content_backbone="tiny", distortion_backbone="tiny", dim=16, squeeze=4, gate_dim=8)
        base.update(overrides)
        return cls(**base)


class CoDIIQA(nn.Module):
    """No-reference quality model.

    ``forward`` maps a batch of images in [0, 1] (B, 3, H, W) to scores (B,).
    """

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.stage_indices = cfg.resolved_stages()
        self.cae = Encoder(cfg.content_backbone, "CAE", self.stage_indices, cfg.content_normalization)
        self.dae = Encoder(cfg.distortion_backbone, "DAE", self.stage_indices, cfg.distortion_normalization)
        shared = None
        if cfg.shared_ppim:
            shared = InteractionCore(self._stage_cfg(self.stage_indices[-1]), cfg.coarse, cfg.fine, cfg.split)
        self.ppims = nn.ModuleList()
        for sc, sd in zip(self.cae.stage_specs, self.dae.stage_specs):
            self.ppims.append(PPIM(
                sc.channels, sd.channels, self._stage_cfg(sc.index),
                coarse=cfg.coarse, fine=cfg.fine, split=cfg.split,
                offsets_from=cfg.offsets_from, core=shared,
            ))
        self.head = PatchWeightedHead(len(self.stage_indices) * cfg.dim, cfg.head_hidden_ratio, cfg.pooling)
        self._pinned_eval = []

    def _stage_cfg(self, index):
        c = self.cfg
        return StageInteractionConfig(dim=c.dim, squeeze=c.squeeze, kernel=c.kernel, gate_dim=c.gate_dim, stage=index)

    def load_encoder_params(self, content: Optional[BackboneParams] = None,
                            distortion: Optional[BackboneParams] = None):
        if content is not None:
            self.cae.load_params(content)
            self.cfg.content_normalization = content.normalization
        if distortion is not None:
            self.dae.load_params(distortion)
            self.cfg.distortion_normalization = distortion.normalization
        return self

    def pin_eval(self, modules):
        """Keep ``modules`` in eval mode whenever the model is put in train mode."""
        self._pinned_eval = list(modules)
        self.train(self.training)

    def train(self, mode=True):
        super().train(mode)
        for m in self._pinned_eval:
            m.eval()
        return self

    def forward_features(self, x):
        fc = self.cae.pyramid(x)
        fd = self.dae.pyramid(x)
        inter = [p(a, b) for p, a, b in zip(self.ppims, fc.features, fd.features)]
        return {"content": fc, "distortion": fd, "interactions": inter, "fused": fuse_pyramid(inter)}

    def forward(self, x):
        fc = self.cae(x)
        fd = self.dae(x)
        inter = [p(a, b) for p, a, b in zip(self.ppims, fc, fd)]
        return self.head(fuse_pyramid(inter))

    def parameter_groups(self):
        """Named parameters split into families used by freeze policies."""
        groups = {"cae": [], "cae_norm": [], "dae": [], "dae_norm": [], "ppim": [], "head": []}
        for enc, key in ((self.cae, "cae"), (self.dae, "dae")):
            norm_ids = {id(p) for m in enc.norm_modules() for p in m.parameters(recurse=False)}
            for n, p in enc.named_parameters(prefix=key):
                groups[key + "_norm" if id(p) in norm_ids else key].append((n, p))
        groups["ppim"] = list(self.ppims.named_parameters(prefix="ppims"))
        groups["head"] = list(self.head.named_parameters(prefix="head"))
        return groups


def build_model(cfg: Optional[ModelConfig] = None, content: Optional[BackboneParams] = None,
                distortion: Optional[BackboneParams] = None) -> CoDIIQA:
    model = CoDIIQA(cfg)
    return model.load_encoder_params(content, distortion)


def count_parameters(params):
    return sum(p.numel() for _, p in params)

