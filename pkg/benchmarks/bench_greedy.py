"""Benchmark: compiled vs NumPy greedy-MAP kernels.

Builds random query-conditioned kernels at several sizes and times the
selection of k items with every available backend. Run after an editable
install:

    python3 benchmarks/bench_greedy.py --sizes 200 500 1000 2000 --k 16
"""

import argparse
import time

import numpy as np

from promptsel._core import available_backends


def make_kernel(rng, n, d=64):
    E = rng.standard_normal((n, d))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    r = np.exp(0.5 * rng.standard_normal(n))
    S = E @ E.T
    np.fill_diagonal(S, 1.0)
    return np.ascontiguousarray(r[:, None] * S * r[None, :])


def time_backend(fn, kernels, k, reps):
    best = np.inf
    for _ in range(reps):
        start = time.perf_counter()
        for Z in kernels:
            fn(Z, k, 1e-12)
        best = min(best, (time.perf_counter() - start) / len(kernels))
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[100, 200, 500, 1000, 2000])
    parser.add_argument("--k", type=int, default=16)
    parser.add_argument("--kernels", type=int, default=5, help="kernels per size")
    parser.add_argument("--reps", type=int, default=3, help="timed repetitions; best is kept")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}   (k={args.k})")
    header = f"{'n':>6} " + " ".join(f"{name:>12}" for name in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)

    rng = np.random.default_rng(args.seed)
    for n in args.sizes:
        kernels = [make_kernel(rng, n) for _ in range(args.kernels)]
        # agreement check before timing
        results = {
            name: [fn(Z, args.k, 1e-12) for Z in kernels] for name, fn in backends.items()
        }
        names = list(backends)
        for i in range(1, len(names)):
            for (ia, ga), (ib, gb) in zip(results[names[0]], results[names[i]]):
                assert np.array_equal(ia, ib), "backends disagree on selection"
                assert np.allclose(ga, gb, atol=1e-9), "backends disagree on gains"
        times = {name: time_backend(fn, kernels, args.k, args.reps) for name, fn in backends.items()}
        row = f"{n:>6} " + " ".join(f"{times[name] * 1e3:>10.3f}ms" for name in backends)
        if len(backends) == 2:
            row += f" {times['numpy'] / times['compiled']:>8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
