"""Pure-Python counterparts of the compiled kernels in ``_kernels.pyx``.

The deformable sampler is written with torch tensor ops, so autograd
provides its backward pass directly.
"""
import numpy as np
import torch


def deform_sample(x, offset, kh, kw, stride, pad, dil):
    """Bilinearly sample ``x`` at the offset-shifted kernel taps.

    Returns columns of shape (B, C, kh * kw, Ho, Wo).
    """
    B, C, H, W = x.shape
    Ho, Wo = offset.shape[-2:]
    K = kh * kw
    off = offset.reshape(B, K, 2, Ho, Wo)
    dev, dt = x.device, x.dtype

    ki = torch.arange(kh, device=dev, dtype=dt).repeat_interleave(kw) * dil
    kj = torch.arange(kw, device=dev, dtype=dt).repeat(kh) * dil
    base_y = ki.view(K, 1, 1) + (torch.arange(Ho, device=dev, dtype=dt) * stride - pad).view(1, Ho, 1)
    base_x = kj.view(K, 1, 1) + (torch.arange(Wo, device=dev, dtype=dt) * stride - pad).view(1, 1, Wo)
    py = base_y + off[:, :, 0]
    px = base_x + off[:, :, 1]

    y0 = torch.floor(py)
    x0 = torch.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.long()
    x0 = x0.long()

    flat = x.reshape(B, C, H * W)
    out = x.new_zeros(B, C, K * Ho * Wo)
    for dy, dx, wgt in (
        (0, 0, (1 - ly) * (1 - lx)),
        (0, 1, (1 - ly) * lx),
        (1, 0, ly * (1 - lx)),
        (1, 1, ly * lx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).reshape(B, 1, -1)
        vals = flat.gather(2, idx.expand(B, C, -1))
        out = out + vals * (wgt * valid).reshape(B, 1, -1)
    return out.reshape(B, C, K, Ho, Wo)


def kendall_counts(x, y):
    """Concordant-minus-discordant pairs and the two tie counts."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    s = tx = ty = 0
    for i in range(len(x) - 1):
        sx = np.sign(x[i] - x[i + 1:])
        sy = np.sign(y[i] - y[i + 1:])
        s += int(np.sum(sx * sy))
        tx += int(np.count_nonzero(sx == 0))
        ty += int(np.count_nonzero(sy == 0))
    return s, tx, ty
