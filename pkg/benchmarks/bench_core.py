"""Time the compiled core against the numpy fallback on the hot kernels.

    python benchmarks/bench_core.py [--repeat 5]

Prints one row per (operation, size): best-of-``repeat`` wall time for each
implementation and the speedup. Results are checked for agreement first.
"""
import argparse
import time

import numpy as np

from scaledmmd import _backend


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    for n, d in ((64, 2), (256, 2), (256, 16), (1024, 2)):
        X, Y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        yield f"gaussian_derivs n={n} d={d}", lambda impl, X=X, Y=Y: _backend.gaussian_derivs(X, Y, 1.0, impl)
    for n, d in ((128, 2), (256, 4), (512, 2)):
        X = rng.normal(size=(n, d))
        yield f"gaussian_gram n={n} d={d}", lambda impl, X=X: _backend.gaussian_gram(X, X, 1.0, impl)
    for N in (200, 600, 1200):
        A = rng.normal(size=(N, 40))
        S = A @ A.T
        yield f"pivoted_cholesky N={N}", lambda impl, S=S: _backend.pivoted_cholesky(S, 1e-10, N, impl)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = _backend.implementations()
    if "compiled" not in impls:
        print("compiled core not available; only the python fallback is installed")
    rng = np.random.default_rng(0)
    print(f"{'operation':34s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s}")
    for name, fn in cases(rng):
        ref = fn(impls["python"])
        tp = best_time(lambda: fn(impls["python"]), args.repeat)
        if "compiled" in impls:
            out = fn(impls["compiled"])
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            for a, b in pairs:
                assert np.allclose(a, b, atol=1e-10), name
            tc = best_time(lambda: fn(impls["compiled"]), args.repeat)
            print(f"{name:34s} {1e3 * tp:12.3f} {1e3 * tc:14.3f} {tp / tc:8.2f}")
        else:
            print(f"{name:34s} {1e3 * tp:12.3f} {'-':>14s} {'-':>8s}")


if __name__ == "__main__":
    main()
