"""Hierarchical fusion of stage interactions and patch-weighted scoring."""
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateWeightsError, InputError

WEIGHT_EPS = 1e-8


def fuse_pyramid(interactions: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average-pool every stage down to the coarsest grid and concatenate channels."""
    if len(interactions) == 0:
        raise InputError("no interaction features to fuse")
    dims = {g.shape[1] for g in interactions}
    if len(dims) != 1:
        raise InputError(f"interaction features disagree on channel width: {sorted(dims)}")
    if len(interactions) == 1:
        return interactions[0]
    target = min((tuple(g.shape[-2:]) for g in interactions), key=lambda s: s[0] * s[1])
    pooled = [g if tuple(g.shape[-2:]) == target else F.adaptive_avg_pool2d(g, target) for g in interactions]
    return torch.cat(pooled, dim=1)


def weighted_pool(scores, weights, eps=WEIGHT_EPS):
    """sum(s * w) / sum(w) over the last axis."""
    total = weights.sum(dim=-1)
    if bool((total <= eps).any()):
        raise DegenerateWeightsError(f"patch weights sum to {total.min().item():.3g}")
    return (scores * weights).sum(dim=-1) / total


class PatchWeightedHead(nn.Module):
    """Per-location score and weight MLPs pooled into one quality value.

    Both branches are ``in_dim -> in_dim // hidden_ratio -> 1`` with GELU;
    the weight branch ends in a sigmoid so the weight sum stays positive.
    ``pooling="mean"`` drops the weight branch (ablation baseline).
    """

    def __init__(self, in_dim, hidden_ratio=2, pooling="patch-weighted"):
        super().__init__()
        if pooling not in ("patch-weighted", "mean"):
            raise ValueError(f"unknown pooling {pooling!r}")
        hidden = max(1, in_dim // hidden_ratio)
        self.in_dim, self.hidden, self.pooling = in_dim, hidden, pooling
        self.score = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, 1))
        if pooling == "patch-weighted":
            self.weight = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, 1), nn.Sigmoid())
        else:
            self.weight = None

    def branches(self, g):
        """Per-location scores and weights, each (B, H*W)."""
        if g.shape[1] != self.in_dim:
            raise InputError(f"fused feature has {g.shape[1]} channels, head expects {self.in_dim}")
        tokens = g.flatten(2).transpose(1, 2)
        s = self.score(tokens).squeeze(-1)
        w = self.weight(tokens).squeeze(-1) if self.weight is not None else torch.ones_like(s)
        return s, w

    def forward(self, g):
        if not torch.isfinite(g).all():
            raise InputError("fused feature contains non-finite values")
        s, w = self.branches(g)
        return weighted_pool(s, w)


def predict_quality(g, head: PatchWeightedHead):
    return head(g)


def mse_loss(pred, label):
    """Squared error; batched inputs are averaged over the batch."""
    pred = torch.as_tensor(pred, dtype=torch.get_default_dtype()) if not torch.is_tensor(pred) else pred
    label = torch.as_tensor(label, dtype=pred.dtype, device=pred.device)
    return F.mse_loss(pred, label)
