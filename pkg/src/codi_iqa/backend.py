"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
pure-Python versions in ``_fallback`` take over. Set ``CODI_IQA_BACKEND``
to ``python`` to force the fallback, or to ``compiled`` to fail loudly
when the extension is missing.
"""
import logging
import os

import numpy as np
import torch
from torch.autograd.function import once_differentiable

from . import _fallback

logger = logging.getLogger(__name__)

try:
    from . import _kernels
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None

_requested = os.environ.get("CODI_IQA_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(f"CODI_IQA_BACKEND must be auto, compiled or python, got {_requested!r}")
if _requested == "compiled" and _kernels is None:
    raise ImportError("CODI_IQA_BACKEND=compiled but codi_iqa._kernels is not built")

_active = "python" if (_requested == "python" or _kernels is None) else "compiled"


def available():
    """Backends that can be selected in this environment."""
    return ["compiled", "python"] if _kernels is not None else ["python"]


def active():
    return _active


def set_backend(name):
    """Switch the process-wide backend; returns the previous one."""
    global _active
    if name not in available():
        raise ValueError(f"backend {name!r} not available (have {available()})")
    prev, _active = _active, name
    return prev


class use_backend:
    """Context manager that temporarily switches the backend."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self._prev = set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self._prev)


class _CompiledDeformSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, offset, kh, kw, stride, pad, dil):
        xa = x.detach().contiguous()
        oa = offset.detach().contiguous()
        cols = _kernels.deform_im2col(xa.numpy(), oa.numpy(), kh, kw, stride, pad, dil)
        ctx.save_for_backward(xa, oa)
        ctx.geom = (kh, kw, stride, pad, dil)
        return torch.from_numpy(cols)

    @staticmethod
    @once_differentiable
    def backward(ctx, grad):
        xa, oa = ctx.saved_tensors
        kh, kw, stride, pad, dil = ctx.geom
        B, C, K, Ho, Wo = grad.shape
        g = grad.contiguous().reshape(B, C, K * Ho, Wo).numpy()
        gx, goff = _kernels.deform_col2im(g, xa.numpy(), oa.numpy(), kh, kw, stride, pad, dil)
        return torch.from_numpy(gx), torch.from_numpy(goff), None, None, None, None, None


def deform_sample(x, offset, kh=3, kw=3, stride=1, pad=1, dil=1):
    """Offset-shifted bilinear sampling with zero padding.

    ``x`` is (B, C, H, W), ``offset`` is (B, 2 * kh * kw, Ho, Wo) with the
    row shift of tap k in channel 2k and its column shift in 2k + 1.
    Returns (B, C, kh * kw, Ho, Wo).
    """
    if offset.dim() != 4 or offset.shape[0] != x.shape[0] or offset.shape[1] != 2 * kh * kw:
        raise ValueError(
            f"offsets must be (B, {2 * kh * kw}, Ho, Wo) for batch {x.shape[0]}, got {tuple(offset.shape)}"
        )
    ho = (x.shape[2] + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (x.shape[3] + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    if tuple(offset.shape[2:]) != (ho, wo):
        raise ValueError(f"offsets must cover the {ho}x{wo} output grid, got {tuple(offset.shape[2:])}")
    if not torch.isfinite(offset).all():
        raise ValueError("non-finite offsets")
    use_compiled = (
        _active == "compiled"
        and x.device.type == "cpu"
        and x.dtype in (torch.float32, torch.float64)
        and offset.dtype == x.dtype
    )
    if use_compiled:
        return _CompiledDeformSample.apply(x, offset, kh, kw, stride, pad, dil)
    return _fallback.deform_sample(x, offset, kh, kw, stride, pad, dil)


def kendall_counts(x, y):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _active == "compiled":
        s, tx, ty = _kernels.kendall_counts(x, y)
        return int(s), int(tx), int(ty)
    return _fallback.kendall_counts(x, y)
