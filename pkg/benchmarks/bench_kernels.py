"""Compare the numba and numpy kernel paths on a training-sized workload.

    python benchmarks/bench_kernels.py [--batches 200] [--hidden 512] [--dim 500]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from regcl import kernels


def _batch(rng, rows, dim, density):
    x = rng.random((rows, dim)) < density
    indptr = np.concatenate([[0], np.cumsum(x.sum(axis=1))]).astype(np.int64)
    return indptr, np.nonzero(x)[1].astype(np.int64)


def _time(fn, repeats):
    fn()  # warm-up; includes numba compilation on first call
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batches", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--dim", type=int, default=500)
    ap.add_argument("--hidden", type=int, default=512)
    ap.add_argument("--density", type=float, default=0.05)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    batches = [_batch(rng, args.batch_size, args.dim, args.density) for _ in range(args.batches)]
    w1t = rng.normal(size=(args.dim, args.hidden))
    b1 = rng.normal(size=args.hidden)
    dpre = rng.normal(size=(args.batch_size, args.hidden))
    dw1t = np.zeros_like(w1t)
    n_params = args.dim * args.hidden + args.hidden * 3 + 2
    theta, vel, grad = rng.normal(size=(3, n_params))

    rows = []
    for name in ("sparse_affine", "sparse_outer_accumulate"):
        timings = {}
        for backend in ("numba", "numpy"):
            fn = getattr(kernels, f"{name}_{backend}")
            args_for = (lambda ip, ix: (ip, ix, w1t, b1)) if name == "sparse_affine" else \
                (lambda ip, ix: (ip, ix, dpre, dw1t))
            timings[backend] = _time(lambda: [fn(*args_for(ip, ix)) for ip, ix in batches], 3)
        rows.append((name, timings))
    timings = {b: _time(lambda f=getattr(kernels, f"momentum_step_{b}"): [f(theta, vel, grad, 1e-3, 0.9)
                                                                      for _ in range(args.batches)], 3)
               for b in ("numba", "numpy")}
    rows.append(("momentum_step", timings))

    print(f"{args.batches} batches of {args.batch_size}, d={args.dim}, h={args.hidden}; active backend: {kernels.BACKEND}")
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, t in rows:
        print(f"{name:<26}{t['numba'] * 1e3:>10.2f}{t['numpy'] * 1e3:>10.2f}{t['numpy'] / t['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
