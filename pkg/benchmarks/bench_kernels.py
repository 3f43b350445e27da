"""Compare the compiled and numpy kernels on split search, tree evaluation and a full fit.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--features 111] [--repeat 3]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from earlywarn import _pykernels
from earlywarn.learners import presort

try:
    from earlywarn import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def fit_seconds(pure: bool, rows: int, features: int) -> float:
    """Time one default-sized fit in a fresh interpreter so the backend is picked at import."""
    code = (
        "import time, numpy as np\n"
        "from earlywarn.learners import GbtParams, gbt_fit\n"
        f"rng = np.random.default_rng(0); X = rng.normal(size=({rows}, {features}))\n"
        "y = (X[:, 0] + 0.5 * rng.normal(size=len(X)) > 1.5).astype(float)\n"
        "t = time.perf_counter(); gbt_fit(X, y, GbtParams(n_trees=50)); print(time.perf_counter() - t)\n"
    )
    env = {**os.environ, "EARLYWARN_PURE_PYTHON": "1" if pure else "0"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--features", type=int, default=111)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    X = rng.normal(size=(args.rows, args.features))
    r = rng.normal(size=args.rows)
    XT, order = np.ascontiguousarray(X.T), presort(X)
    tree = (
        np.array([0, 1, -1, -1, -1], dtype=np.intp),
        np.array([0.0, 0.5, 0, 0, 0]),
        np.array([1, 3, -1, -1, -1], dtype=np.intp),
        np.array([2, 4, -1, -1, -1], dtype=np.intp),
        np.array([0, 0, 1.0, 2.0, 3.0]),
    )

    rows = []
    for name, mod in (("python", _pykernels), ("cython", _ckernels)):
        if mod is None:
            continue
        split = best_of(lambda: mod.best_split(XT, r, order, 20, 1e-10), args.repeat)
        apply = best_of(lambda: mod.tree_apply(X, *tree), args.repeat)
        rows.append((name, split, apply, fit_seconds(name == "python", args.rows, args.features)))

    print(f"{args.rows} rows x {args.features} features, best of {args.repeat}")
    print(f"{'backend':<8} {'best_split s':>13} {'tree_apply s':>13} {'fit(50) s':>10}")
    for name, split, apply, fit in rows:
        print(f"{name:<8} {split:>13.4f} {apply:>13.4f} {fit:>10.2f}")
    if len(rows) == 2:
        (_, ps, pa, pf), (_, cs, ca, cf) = rows
        print(f"speedup  {ps / cs:>12.1f}x {pa / ca:>12.1f}x {pf / cf:>9.1f}x")
    else:
        print("compiled kernels not built; only the fallback was timed")


if __name__ == "__main__":
    main()
