#!/usr/bin/env python3
"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--runs N]

Also checks that both backends agree on every case before timing.
"""
import argparse
import sys

import numpy as np

from lightdetr import kernels
from lightdetr.bench import _kernel_cases, bench_kernels


def check_agreement() -> bool:
    impls = kernels.backends()
    if len(impls) < 2:
        print("compiled backend not built; only the numpy fallback is available", file=sys.stderr)
        return True
    ok = True
    for name, call in _kernel_cases().items():
        a, b = call(impls["python"]), call(impls["cython"])
        if isinstance(a, tuple):
            same = all(np.array_equal(x, y) for x, y in zip(a, b))
        elif a.dtype.kind in "iu":
            same = np.array_equal(a, b)
        else:
            same = np.allclose(a, b, rtol=1e-5, atol=1e-6)
        print(f"{name:24s} backends agree: {same}")
        ok &= same
    return ok


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", type=int, default=30)
    args = parser.parse_args()
    if not check_agreement():
        return 1
    print(f"{'kernel':24s} {'backend':8s} {'median ms':>10s} {'speedup':>8s}")
    for r in bench_kernels(runs=args.runs):
        print(f"{r.kernel:24s} {r.backend:8s} {r.median_ms:10.3f} {r.speedup:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
