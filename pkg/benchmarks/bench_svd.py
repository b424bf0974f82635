"""Time the compiled Jacobi sweep kernel against the numpy fallback.

    python3 benchmarks/bench_svd.py [--repeats 20]

Shapes cover the queue sizes DQ-PCA sees (C x d after centering) plus a few
larger ones. Both kernels run on identical copies; the script also reports
the largest difference between their rotated outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from qtuning.numkernel import _jacobi_py
from qtuning.numkernel.svd import MAX_SWEEPS, OFF_TOL

try:
    from qtuning.numkernel import _jacobi
except ImportError:
    _jacobi = None

SHAPES = [(10, 8), (50, 16), (50, 32), (100, 32), (128, 64)]


def _inputs(m: int, n: int, rng: np.random.Generator):
    a = rng.standard_normal((m, n))
    a -= a.mean(axis=0)
    return np.ascontiguousarray(a.T), np.eye(n)


def _time(kernel, at, vt, repeats: int) -> float:
    def once():
        kernel(at.copy(), vt.copy(), MAX_SWEEPS, OFF_TOL)

    return min(timeit.repeat(once, number=1, repeat=repeats)) * 1e3


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    if _jacobi is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'shape':>10s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for m, n in SHAPES:
        at, vt = _inputs(m, n, rng)
        t_py = _time(_jacobi_py.jacobi_sweeps, at, vt, args.repeats)
        if _jacobi is None:
            print(f"{m:>4d}x{n:<5d} {t_py:10.3f} {'-':>10s} {'-':>8s} {'-':>9s}")
            continue
        t_cy = _time(_jacobi.jacobi_sweeps, at, vt, args.repeats)
        a1, v1, a2, v2 = at.copy(), vt.copy(), at.copy(), vt.copy()
        _jacobi_py.jacobi_sweeps(a1, v1, MAX_SWEEPS, OFF_TOL)
        _jacobi.jacobi_sweeps(a2, v2, MAX_SWEEPS, OFF_TOL)
        diff = max(np.max(np.abs(a1 - a2)), np.max(np.abs(v1 - v2)))
        print(f"{m:>4d}x{n:<5d} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:8.1f} {diff:9.1e}")


if __name__ == "__main__":
    main()
