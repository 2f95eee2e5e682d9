"""Benchmark the numba-compiled kernels against the pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5]

Workload sizes mirror a realistic training step: message passing over a
30k-edge subgraph at width 200, the decoder convolution at 128x500x200,
and similarity tiles over 512-row blocks. Each kernel's outputs are
cross-checked between backends before timing.
"""

import argparse
import time

import numpy as np

from kgc import kernels


def timeit(fn, args, repeats):
    fn(*args)  # warm-up (and JIT compile for the numba path)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def workloads(rng):
    edges, nodes, dim = 30_000, 8_000, 200
    idx = rng.integers(0, nodes, size=edges)
    vals = rng.normal(size=(edges, dim)).astype(np.float32)
    logits = rng.normal(size=edges).astype(np.float32)
    ab = rng.normal(size=(edges, dim)).astype(np.float32)

    batch, channels, width = 128, 500, 5
    x = rng.normal(size=(batch, 2, dim)).astype(np.float32)
    k = rng.normal(size=(channels, 2, width)).astype(np.float32)
    grad = rng.normal(size=(batch, channels, dim)).astype(np.float32)

    unit = rng.normal(size=(512, 256))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)

    return [
        ("scatter_add_rows", lambda f: f(np.zeros((nodes, dim), np.float32), idx, vals)),
        ("segment_max", lambda f: f(logits, idx, nodes)),
        ("rowwise_dot", lambda f: f(ab, vals)),
        ("conv_tworow_forward", lambda f: f(x, k)),
        ("conv_tworow_grad_kernels", lambda f: f(grad, x, width)),
        ("conv_tworow_grad_input", lambda f: f(grad, k)),
        ("row_norms", lambda f: f(vals)),
        ("sim_tile", lambda f: f(unit, unit)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    impls = kernels.implementations()
    if "numba" not in impls:
        raise SystemExit("numba unavailable; nothing to compare")

    rng = np.random.default_rng(0)
    rows = []
    for name, call in workloads(rng):
        out = {}
        for backend in ("numpy", "numba"):
            fn = impls[backend][name]
            out[backend + "_time"] = timeit(lambda f=fn: call(f), (), args.repeats)
            out[backend + "_result"] = call(fn)
        a, b = out["numpy_result"], out["numba_result"]
        if a is not None and b is not None:  # in-place kernels return None
            # float32 workloads: summation order differs between backends
            np.testing.assert_allclose(a, b, rtol=1e-2, atol=1e-3)
        rows.append((name, out["numpy_time"], out["numba_time"]))

    print(f"{'kernel':<28}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, t_np, t_nb in rows:
        print(f"{name:<28}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms"
              f"{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
