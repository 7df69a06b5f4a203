"""Progressive perception interaction between content and distortion features.

Per stage, both feature maps are aligned to a common width ``dim`` with a
gated dual-branch block, fused coarsely by concat + 3x3 conv, and refined
by a deformable path on half of the content channels whose sampling
offsets are predicted from the distortion features.
"""
from dataclasses import dataclass

import torch
from torch import nn

from . import backend
from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class StageInteractionConfig:
    dim: int = 384
    squeeze: int = 64
    kernel: int = 3
    gate_dim: int = 64
    stage: int = 0

    def __post_init__(self):
        if self.dim % 2:
            raise ConfigurationError(f"dim must be even, got {self.dim}")
        if not 0 < self.squeeze <= self.dim // 2:
            raise ConfigurationError(f"squeeze must be in (0, dim/2], got {self.squeeze}")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be odd")

    @property
    def taps(self):
        """Sampling points of the deformable kernel (N)."""
        return self.kernel * self.kernel


def channel_shuffle(x, groups=2):
    b, c, h, w = x.shape
    if c % groups:
        raise InputError(f"{c} channels do not split into {groups} groups")
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class DeformConv2d(nn.Module):
    """Deformable convolution (one offset group, no modulation).

    Offsets are (B, 2 * k * k, H', W'), row shift first for every tap.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, dilation=1,
                 groups=1, bias=True):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError("channels must be divisible by groups")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = kernel_size
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.padding = dilation * (kernel_size - 1) // 2 if padding is None else padding
        # Same initialization as nn.Conv2d so zero offsets reproduce it exactly.
        ref = nn.Conv2d(in_channels, out_channels, kernel_size, groups=groups, bias=bias)
        self.weight = nn.Parameter(ref.weight.detach().clone())
        self.bias = nn.Parameter(ref.bias.detach().clone()) if bias else None

    def forward(self, x, offset):
        k = self.kernel_size
        cols = backend.deform_sample(x, offset, k, k, self.stride, self.padding, self.dilation)
        b, c, taps, ho, wo = cols.shape
        g = self.groups
        cols = cols.reshape(b, g, (c // g) * taps, ho * wo)
        w = self.weight.reshape(g, self.out_channels // g, (c // g) * taps)
        out = torch.einsum("goi,bgip->bgop", w, cols).reshape(b, self.out_channels, ho, wo)
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1)
        return out


class DepthwiseSeparable(nn.Sequential):
    """3x3 depthwise conv followed by a 1x1 conv."""

    def __init__(self, channels, out_channels=None, kernel=3):
        super().__init__(
            nn.Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels),
            nn.Conv2d(channels, out_channels or channels, 1),
        )


class DepthwiseSeparableDeformable(nn.Module):
    """Depthwise deformable 3x3 conv followed by a 1x1 conv."""

    def __init__(self, channels, kernel=3):
        super().__init__()
        self.deform = DeformConv2d(channels, channels, kernel, groups=channels)
        self.point = nn.Conv2d(channels, channels, 1)

    def forward(self, x, offset):
        return self.point(self.deform(x, offset))


class AlignBranches(nn.Module):
    """Feature branch and gating branch applied after the width reduction."""

    def __init__(self, dim, gate_dim=64):
        super().__init__()
        self.feature = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1, groups=dim),
            nn.BatchNorm2d(dim),
            nn.Conv2d(dim, dim, 1),
            nn.GELU(),
            nn.Conv2d(dim, dim, 1),
            nn.GELU(),
        )
        self.weighting = nn.Sequential(
            nn.Conv2d(dim, gate_dim, 1),
            nn.GELU(),
            nn.Conv2d(gate_dim, gate_dim, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(gate_dim, 1, 3, padding=1),
        )

    def gate(self, x):
        return torch.sigmoid(self.weighting(x))

    def forward(self, x):
        return self.gate(x) * self.feature(x)


class FineInteraction(nn.Module):
    """Split content features; plain DSC on one half, deformable DSC on the other.

    The squeeze (D/2 -> r) and unsqueeze (r -> D/2) projections are shared
    by both halves. With ``split=False`` the whole width goes through the
    deformable path and no shuffle is applied.
    """

    def __init__(self, dim, squeeze, kernel=3, split=True):
        super().__init__()
        self.split = split
        width = dim // 2 if split else dim
        self.squeeze = nn.Conv2d(width, squeeze, 1)
        self.unsqueeze = nn.Conv2d(squeeze, width, 1)
        if split:
            self.plain = DepthwiseSeparable(squeeze, kernel=kernel)
        self.deformable = DepthwiseSeparableDeformable(squeeze, kernel)

    def forward(self, wc, offsets):
        if not self.split:
            return self.unsqueeze(self.deformable(self.squeeze(wc), offsets))
        c1, c2 = wc.chunk(2, dim=1)
        g1 = self.unsqueeze(self.plain(self.squeeze(c1)))
        g2 = self.unsqueeze(self.deformable(self.squeeze(c2), offsets))
        return channel_shuffle(torch.cat([g1, g2], dim=1), 2)


class InteractionCore(nn.Module):
    """Everything in a PPIM except the per-stage width reductions."""

    def __init__(self, cfg: StageInteractionConfig, coarse=True, fine=True, split=True):
        super().__init__()
        if not (coarse or fine):
            raise ConfigurationError("at least one of the coarse and fine paths must be enabled")
        self.cfg = cfg
        d = cfg.dim
        self.align_content = AlignBranches(d, cfg.gate_dim)
        self.align_distortion = AlignBranches(d, cfg.gate_dim)
        self.coarse = nn.Conv2d(2 * d, d, 3, padding=1) if coarse else None
        if fine:
            self.offsets = DepthwiseSeparable(d, 2 * cfg.taps, kernel=cfg.kernel)
            self.fine = FineInteraction(d, cfg.squeeze, cfg.kernel, split=split)
        else:
            self.offsets = self.fine = None


class PPIM(nn.Module):
    """Interaction block for one stage.

    ``offsets_from`` selects which aligned feature predicts the deformable
    offsets ("distortion" normally, "content" for the ablation). Passing a
    ``core`` shares everything but the width reductions with other stages.
    """

    def __init__(self, content_channels, distortion_channels, cfg: StageInteractionConfig,
                 coarse=True, fine=True, split=True, offsets_from="distortion", core=None):
        super().__init__()
        if offsets_from not in ("distortion", "content"):
            raise ConfigurationError(f"offsets_from must be distortion or content, got {offsets_from!r}")
        self.cfg = cfg
        self.offsets_from = offsets_from
        self.channels = (content_channels, distortion_channels)
        self.reduce_content = nn.Conv2d(content_channels, cfg.dim, 1)
        self.reduce_distortion = nn.Conv2d(distortion_channels, cfg.dim, 1)
        self.core = core if core is not None else InteractionCore(cfg, coarse, fine, split)

    def align(self, fc, fd):
        """Gated, width-reduced content and distortion features."""
        if fc.shape[1] != self.channels[0] or fd.shape[1] != self.channels[1]:
            raise InputError(
                f"expected ({self.channels[0]}, {self.channels[1]}) channels, got ({fc.shape[1]}, {fd.shape[1]})"
            )
        return self.core.align_content(self.reduce_content(fc)), self.core.align_distortion(self.reduce_distortion(fd))

    def gates(self, fc, fd):
        """Sigmoid gate maps of both alignment blocks, each (B, 1, H, W)."""
        return (self.core.align_content.gate(self.reduce_content(fc)),
                self.core.align_distortion.gate(self.reduce_distortion(fd)))

    def coarse_interact(self, wc, wd):
        if wc.shape != wd.shape:
            raise InputError(f"aligned features differ in shape: {tuple(wc.shape)} vs {tuple(wd.shape)}")
        return self.core.coarse(torch.cat([wc, wd], dim=1))

    def compute_offsets(self, w):
        return self.core.offsets(w)

    def fine_interact(self, wc, offsets):
        n2 = 2 * self.cfg.taps
        if offsets.shape[1] != n2 or offsets.shape[-2:] != wc.shape[-2:]:
            raise InputError(f"offsets must be ({n2}, {tuple(wc.shape[-2:])}), got {tuple(offsets.shape[1:])}")
        return self.core.fine(wc, offsets)

    def forward(self, fc, fd):
        if fc.shape[-2:] != fd.shape[-2:]:
            raise InputError(f"stage features differ in size: {tuple(fc.shape[-2:])} vs {tuple(fd.shape[-2:])}")
        wc, wd = self.align(fc, fd)
        out = self.coarse_interact(wc, wd) if self.core.coarse is not None else None
        if self.core.fine is not None:
            offsets = self.compute_offsets(wd if self.offsets_from == "distortion" else wc)
            g = self.fine_interact(wc, offsets)
            out = g if out is None else out + g
        return out
