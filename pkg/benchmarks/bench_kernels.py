"""Time the numba and numpy metric kernels on identical inputs.

Usage: python3 benchmarks/bench_kernels.py [--size 64] [--repeats 20]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from dapsam.data import render_anatomy
from dapsam.metrics import asd, boundary, dsc


def _masks(size, count, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        _, a = render_anatomy(int(rng.integers(2**31)), size, 2)
        _, b = render_anatomy(int(rng.integers(2**31)), size, 2)
        pairs.append((a.astype(np.int64), b.astype(np.int64)))
    return pairs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--count", type=int, default=16, help="mask pairs per timing call")
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    pairs = _masks(args.size, args.count)

    jobs = {
        "dsc": lambda be: [dsc(a, b, 1, backend=be) for a, b in pairs],
        "boundary": lambda be: [boundary(a == 1, backend=be) for a, _ in pairs],
        "asd": lambda be: [asd(a, b, 1, backend=be) for a, b in pairs],
    }
    print(f"{args.count} mask pairs of {args.size}x{args.size}, best of {args.repeats} calls")
    print(f"{'kernel':>10} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, job in jobs.items():
        ref = job("numpy")
        got = job("numba")  # also triggers compilation outside the timed region
        assert all(np.array_equal(x, y) or np.isclose(x, y, rtol=1e-13) for x, y in zip(got, ref)), name
        t = {be: min(timeit.repeat(lambda: job(be), number=1, repeat=args.repeats)) * 1e3 for be in ("numba", "numpy")}
        print(f"{name:>10} {t['numba']:>10.3f} {t['numpy']:>10.3f} {t['numpy'] / t['numba']:>7.2f}x")


if __name__ == "__main__":
    main()
