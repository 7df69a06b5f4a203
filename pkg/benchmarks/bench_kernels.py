"""Compare compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints a table of median wall times and the speedup of the compiled
backend, plus the max abs difference between the two outputs.
"""
import argparse
import statistics
import time

import numpy as np
import torch

from codi_iqa import backend


def timed(fn, repeat):
    out = fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def deform_case(b, c, h, w, grad):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(b, c, h, w, generator=g)
    off = 2.0 * torch.randn(b, 18, h, w, generator=g)

    def run():
        xi = x.clone().requires_grad_(grad)
        oi = off.clone().requires_grad_(grad)
        cols = backend.deform_sample(xi, oi)
        if grad:
            cols.sum().backward()
            return torch.cat([xi.grad.flatten(), oi.grad.flatten()])
        return cols.detach().flatten()

    return run


def kendall_case(n):
    rng = np.random.default_rng(0)
    x = rng.integers(0, n // 4, n).astype(np.float64)
    y = x + rng.normal(size=n)

    def run():
        return np.array(backend.kendall_counts(x, y), dtype=np.float64)

    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "compiled" not in backend.available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    cases = [
        ("deform fwd 2x64x24x24", deform_case(2, 64, 24, 24, False)),
        ("deform fwd+bwd 2x64x24x24", deform_case(2, 64, 24, 24, True)),
        ("deform fwd 1x384x12x12", deform_case(1, 384, 12, 12, False)),
        ("deform fwd+bwd 1x32x96x96", deform_case(1, 32, 96, 96, True)),
        ("kendall n=2000", kendall_case(2000)),
        ("kendall n=10000", kendall_case(10000)),
    ]
    print(f"{'case':30s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases:
        with backend.use_backend("python"):
            tp, op = timed(fn, args.repeat)
        with backend.use_backend("compiled"):
            tc, oc = timed(fn, args.repeat)
        diff = float((torch.as_tensor(op) - torch.as_tensor(oc)).abs().max())
        print(f"{name:30s} {tp:10.4f} {tc:11.4f} {tp / tc:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
