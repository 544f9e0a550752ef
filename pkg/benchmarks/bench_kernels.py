"""Timing comparison of the compiled and numpy pairwise kernels.

    python3 benchmarks/bench_kernels.py --sizes 256 1024 4096
"""

import argparse
import timeit

import numpy as np

from jkoflow import _kernels_py, kernels

try:
    from jkoflow import _kernels as _compiled
except ImportError:
    _compiled = None


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 2048])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'n':>6}{'numpy [ms]':>13}{'cython [ms]':>13}{'speedup':>9}")
    for n in args.sizes:
        x = rng.uniform(-1, 1, (n, 2))
        y = rng.uniform(-1, 1, (n, 2))
        cases = {
            "pair_velocity": lambda impl: kernels.pair_velocity(x, 0.5, 3.0, impl=impl),
            "pair_energy": lambda impl: kernels.pair_energy(x, 0.5, 3.0, impl=impl),
            "chamfer": lambda impl: kernels.chamfer(x, y, impl=impl),
        }
        for name, call in cases.items():
            t_py = bench(lambda: call(_kernels_py), args.repeat)
            t_c = bench(lambda: call(_compiled), args.repeat)
            print(f"{name:<14}{n:>6}{1e3 * t_py:>13.2f}{1e3 * t_c:>13.2f}{t_py / t_c:>9.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
