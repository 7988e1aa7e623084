"""Compare the compiled and pure-Python stepping kernels.

Run with ``python3 benchmarks/bench_kernels.py``.  Times the affine recursion
at the observer size (12 states) and the 16-section oracle size, checks the
two backends agree, and reports the speed-up.
"""

import argparse
import time

import numpy as np

from linefdi import _fallback
from linefdi.io import load_line_config
from linefdi.sim import OracleNetwork, default_sources

try:
    from linefdi import _kernels
except ImportError:  # extension not built
    _kernels = None


def _case(n, K, rng):
    P = rng.standard_normal((n, n))
    P *= 0.95 / np.abs(np.linalg.eigvals(P)).max()
    return P, rng.standard_normal((K, n)), rng.standard_normal(n)


def _best(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=64_000, help="steps per run (6.4 s at 100 us)")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    line = load_line_config("builtin:table1")
    oracle = OracleNetwork(line, default_sources(line), 16)
    sizes = {"observer": 12, "oracle (16 sections)": oracle.N}
    print(f"{'case':<22}{'states':>7}{'python s':>11}{'cython s':>11}{'speed-up':>10}{'max diff':>11}")
    for name, n in sizes.items():
        P, W, x0 = _case(n, args.samples, rng)
        tp, xp = _best(_fallback.affine_recursion, (P, W, x0), args.repeat)
        if _kernels is None:
            print(f"{name:<22}{n:>7}{tp:>11.3f}{'n/a':>11}{'':>10}{'':>11}")
            continue
        tc, xc = _best(_kernels.affine_recursion, (P, W, x0), args.repeat)
        diff = np.abs(xp - xc).max() / max(np.abs(xp).max(), 1.0)
        print(f"{name:<22}{n:>7}{tp:>11.3f}{tc:>11.3f}{tp / tc:>9.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
