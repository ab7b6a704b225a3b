"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 5]

Prints the best wall time of each kernel on each backend, the speedup, and
the largest absolute difference between the two outputs.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from diffflow.kernels import get_backend


def cases(rng: np.random.Generator) -> dict:
    cloud = rng.normal(size=(5000, 2))
    queries = rng.normal(size=(2000, 2))
    a = rng.normal(size=(3000, 2))
    b = rng.normal(size=(3000, 2))
    return {
        "counter_normals 1e6 x 2": lambda m: m.counter_normals(7, 0, 1_000_000, 3, 2),
        "kde_score 2000 q / 5000 pts": lambda m: m.kde_score(cloud, queries, 0.3),
        "pairwise_row_sums 3000 x 3000": lambda m: m.pairwise_row_sums(a, b),
    }


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    py = get_backend("python")
    try:
        cy = get_backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1

    print(f"{'kernel':32s} {'cython [s]':>11s} {'python [s]':>11s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(np.asarray(fn(cy)) - np.asarray(fn(py)))))
        print(f"{name:32s} {t_cy:11.4f} {t_py:11.4f} {t_py / t_cy:7.1f}x {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
