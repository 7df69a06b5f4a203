import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from codi_iqa.errors import DegenerateWeightsError, InputError
from codi_iqa.head import PatchWeightedHead, fuse_pyramid, mse_loss, predict_quality, weighted_pool
from oracles import brute_weighted_mean

scores = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50)


@pytest.mark.parametrize("seed", range(20))
def test_weighted_pool_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    s, w = rng.normal(size=n), rng.uniform(0.01, 1, size=n)
    got = weighted_pool(torch.tensor(s), torch.tensor(w)).item()
    assert abs(got - brute_weighted_mean(s, w)) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(scores, st.floats(0.01, 1.0))
def test_constant_weights_give_mean(s, c):
    t = torch.tensor(s, dtype=torch.float64)
    assert weighted_pool(t, torch.full_like(t, c)).item() == pytest.approx(float(np.mean(s)), abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10, allow_nan=False), st.floats(1e-3, 1.0)), min_size=1, max_size=50))
def test_pooled_value_is_bounded(pairs):
    s = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    w = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    q = weighted_pool(s, w).item()
    assert s.min().item() - 1e-9 <= q <= s.max().item() + 1e-9


def test_degenerate_weights_rejected():
    with pytest.raises(DegenerateWeightsError):
        weighted_pool(torch.ones(4), torch.zeros(4))


def test_batched_pooling():
    s, w = torch.randn(3, 7), torch.rand(3, 7) + 0.1
    out = weighted_pool(s, w)
    assert out.shape == (3,)
    for i in range(3):
        assert out[i].item() == pytest.approx(brute_weighted_mean(s[i].tolist(), w[i].tolist()), abs=1e-6)


def test_fuse_pyramid_pools_to_coarsest_grid():
    gs = [torch.randn(2, 4, 16, 16), torch.randn(2, 4, 8, 8), torch.randn(2, 4, 4, 4)]
    fused = fuse_pyramid(gs)
    assert fused.shape == (2, 12, 4, 4)
    assert torch.allclose(fused[:, :4], torch.nn.functional.avg_pool2d(gs[0], 4), atol=1e-6)
    assert torch.equal(fused[:, 8:], gs[2])


def test_fuse_single_stage_is_identity_and_errors():
    g = torch.randn(1, 4, 3, 3)
    assert fuse_pyramid([g]) is g
    with pytest.raises(InputError):
        fuse_pyramid([])
    with pytest.raises(InputError):
        fuse_pyramid([torch.randn(1, 4, 3, 3), torch.randn(1, 5, 3, 3)])


def test_head_widths_and_output():
    head = PatchWeightedHead(12)
    assert head.hidden == 6
    assert [m.out_features for m in head.score if hasattr(m, "out_features")] == [6, 1]
    g = torch.randn(2, 12, 3, 3)
    q = predict_quality(g, head)
    s, w = head.branches(g)
    assert q.shape == (2,)
    assert w.min().item() > 0 and w.max().item() < 1
    assert torch.allclose(q, (s * w).sum(1) / w.sum(1))


def test_mean_pooling_variant():
    head = PatchWeightedHead(8, pooling="mean")
    g = torch.randn(1, 8, 2, 2)
    s, _ = head.branches(g)
    assert head.weight is None
    assert torch.allclose(head(g), s.mean(1))
    with pytest.raises(ValueError):
        PatchWeightedHead(8, pooling="max")


def test_head_rejects_bad_input():
    head = PatchWeightedHead(8)
    with pytest.raises(InputError):
        head(torch.randn(1, 6, 2, 2))
    bad = torch.randn(1, 8, 2, 2)
    bad[0, 0, 0, 0] = float("inf")
    with pytest.raises(InputError):
        head(bad)


def test_mse_loss():
    assert mse_loss(torch.tensor([1.0, 3.0]), [0.0, 1.0]).item() == pytest.approx(2.5)
    assert mse_loss(torch.tensor(0.5), 0.25).item() == pytest.approx(0.0625)
