#!/usr/bin/env python3
"""Benchmark the numba kernel backend against the pure-NumPy fallback.

Times the hot path (fused batch loss+gradient), the forward pass, and the
row-wise softmax on identical inputs, and reports the numerical agreement
between the two implementations. The numba path is warmed up first so JIT
compilation is not counted.

Usage: python benchmarks/bench_backends.py [--batch 50] [--dims 20,64,64,10]
       [--repeats 2000]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fedsim import kernels
from fedsim.nn import param_count


def time_fn(fn, repeats: int) -> float:
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=50)
    ap.add_argument("--dims", default="20,64,64,10",
                    help="comma-separated layer widths, input..output")
    ap.add_argument("--repeats", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    dims = np.array([int(d) for d in args.dims.split(",")], dtype=np.int64)
    n_params = param_count(dims)
    rng = np.random.default_rng(args.seed)
    theta = rng.normal(size=n_params) * 0.1
    X = rng.normal(size=(args.batch, int(dims[0])))
    y = rng.integers(0, int(dims[-1]), size=args.batch).astype(np.int64)
    logits = rng.normal(size=(args.batch, int(dims[-1])))

    np_k = kernels.get_backend("numpy")
    try:
        nb_k = kernels.get_backend("numba")
    except ImportError:
        print("numba not importable; nothing to compare")
        return 1

    teacher = np_k.softmax_rows(logits, 2.0)
    alpha = rng.random(args.batch)
    alpha /= alpha.sum()

    grads = {}
    results = {}
    for name, k in (("numpy", np_k), ("numba", nb_k)):
        g = np.empty(n_params)
        # warmup (compiles the numba specializations)
        k.softmax_rows(logits, 2.0)
        k.forward_logits(theta, dims, X)
        k.loss_and_grad(theta, dims, X, y, 1.0, 20.0, 2.0, alpha, teacher, g)
        grads[name] = g.copy()
        results[name] = {
            "softmax_rows": time_fn(lambda: k.softmax_rows(logits, 2.0), args.repeats),
            "forward_logits": time_fn(lambda: k.forward_logits(theta, dims, X), args.repeats),
            "loss_and_grad": time_fn(
                lambda: k.loss_and_grad(theta, dims, X, y, 1.0, 20.0, 2.0,
                                        alpha, teacher, g), args.repeats),
        }

    print(f"batch={args.batch} dims={dims.tolist()} params={n_params} "
          f"repeats={args.repeats}")
    print(f"{'kernel':<16} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for key in ("softmax_rows", "forward_logits", "loss_and_grad"):
        t_np = results["numpy"][key] * 1e6
        t_nb = results["numba"][key] * 1e6
        print(f"{key:<16} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.2f}x")
    print(f"gradient agreement: max |numpy - numba| = "
          f"{np.abs(grads['numpy'] - grads['numba']).max():.3e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
