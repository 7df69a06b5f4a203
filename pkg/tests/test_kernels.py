import numpy as np
import pytest
import torch
from torchvision.ops import deform_conv2d

from codi_iqa import backend
from oracles import naive_deform_sample

BACKENDS = backend.available()


def _case(seed, b=1, c=2, h=5, w=6, scale=2.0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, c, h, w, generator=g, dtype=dtype)
    off = scale * torch.randn(b, 18, h, w, generator=g, dtype=dtype)
    return x, off


def test_python_backend_always_available():
    assert "python" in BACKENDS
    assert backend.active() in BACKENDS


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        backend.set_backend("gpu")


def test_use_backend_restores_previous():
    before = backend.active()
    with backend.use_backend("python"):
        assert backend.active() == "python"
    assert backend.active() == before


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("seed", range(4))
def test_sampler_matches_naive_loop(name, seed):
    x, off = _case(seed, scale=3.0)
    with backend.use_backend(name):
        got = backend.deform_sample(x, off).numpy()
    np.testing.assert_allclose(got, naive_deform_sample(x.numpy(), off.numpy()), atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_sampler_stride_and_dilation(name):
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 7, 8, generator=g, dtype=torch.float64)
    off = torch.randn(2, 18, 3, 3, generator=g, dtype=torch.float64)
    with backend.use_backend(name):
        got = backend.deform_sample(x, off, 3, 3, stride=2, pad=1, dil=2).numpy()
    np.testing.assert_allclose(got, naive_deform_sample(x.numpy(), off.numpy(), 3, 3, 2, 1, 2), atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_far_out_of_bounds_offsets_give_zero(name):
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    off = torch.full((1, 18, 4, 4), 100.0, dtype=torch.float64)
    with backend.use_backend(name):
        assert backend.deform_sample(x, off).abs().max().item() == 0.0


@pytest.mark.parametrize("name", BACKENDS)
def test_integer_offsets_shift_exactly(name):
    x = torch.arange(36.0, dtype=torch.float64).view(1, 1, 6, 6)
    off = torch.zeros(1, 18, 6, 6, dtype=torch.float64)
    off[:, 8] = 1.0  # centre tap (k=4) moves one row down
    with backend.use_backend(name):
        cols = backend.deform_sample(x, off)
    centre = cols[0, 0, 4]
    assert torch.equal(centre[:5], x[0, 0, 1:])
    assert torch.equal(centre[5], torch.zeros(6, dtype=torch.float64))


@pytest.mark.parametrize("name", BACKENDS)
def test_weighted_sum_matches_torchvision(name):
    g = torch.Generator().manual_seed(7)
    x = torch.randn(2, 4, 6, 5, generator=g)
    off = 2 * torch.randn(2, 18, 6, 5, generator=g)
    weight = torch.randn(3, 4, 3, 3, generator=g)
    with backend.use_backend(name):
        cols = backend.deform_sample(x, off)
    ours = torch.einsum("oik,bikhw->bohw", weight.view(3, 4, 9), cols)
    ref = deform_conv2d(x, off, weight, padding=1)
    assert (ours - ref).abs().max().item() < 1e-5


@pytest.mark.parametrize("name", BACKENDS)
def test_sampler_gradcheck(name):
    x, off = _case(11, b=2, c=2, h=4, w=4, scale=1.5)
    x.requires_grad_(True)
    off.requires_grad_(True)
    with backend.use_backend(name):
        assert torch.autograd.gradcheck(lambda a, o: backend.deform_sample(a, o), (x, off), eps=1e-6, atol=1e-6)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
def test_compiled_and_python_gradients_agree():
    x, off = _case(5, b=2, c=3, h=6, w=5, scale=2.5)
    grads = {}
    for name in ("compiled", "python"):
        xi, oi = x.clone().requires_grad_(True), off.clone().requires_grad_(True)
        with backend.use_backend(name):
            (backend.deform_sample(xi, oi) * torch.linspace(-1, 1, 9).view(1, 1, 9, 1, 1)).sum().backward()
        grads[name] = (xi.grad, oi.grad)
    for a, b in zip(grads["compiled"], grads["python"]):
        assert torch.allclose(a, b, atol=1e-12)


def test_offset_shape_validated():
    x = torch.randn(1, 2, 5, 5)
    with pytest.raises(ValueError):
        backend.deform_sample(x, torch.zeros(1, 16, 5, 5))
    with pytest.raises(ValueError):
        backend.deform_sample(x, torch.zeros(1, 18, 4, 5))


def test_non_finite_offsets_rejected():
    x = torch.randn(1, 2, 5, 5)
    off = torch.zeros(1, 18, 5, 5)
    off[0, 3, 2, 2] = float("nan")
    with pytest.raises(ValueError):
        backend.deform_sample(x, off)


@pytest.mark.parametrize("name", BACKENDS)
def test_kendall_counts_brute_force(name):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 5, 40).astype(float)
    y = rng.integers(0, 4, 40).astype(float)
    s = tx = ty = 0
    for i in range(40):
        for j in range(i + 1, 40):
            dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
            s += dx * dy
            tx += dx == 0
            ty += dy == 0
    with backend.use_backend(name):
        assert tuple(backend.kendall_counts(x, y)) == (s, tx, ty)
