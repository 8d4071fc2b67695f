"""Compare the compiled and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``.  Prints the median time of
the local-moment kernel at several problem sizes, the maximum absolute
difference between backends, and the wall time of one full smoothing sweep.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from semirep import kernels
from semirep.smoother import SmootherPlan
from semirep.simlab import SimDesign, generate_sim_dataset


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_moments(sizes, k: int, repeat: int) -> None:
    print(f"{'N':>7} {'E':>5} {'cython ms':>10} {'python ms':>10} {'speedup':>8} {'max diff':>10}")
    rng = np.random.default_rng(0)
    for N in sizes:
        zs = np.sort(rng.uniform(size=N))
        ys = rng.standard_normal((N, k))
        ze = np.linspace(0, 1, 101)
        hs = np.full(ze.size, 0.05)
        res = {}
        times = {}
        for name in ("cython", "python"):
            res[name] = kernels.local_moments(zs, ys, ze, hs, backend=name)
            times[name] = _median_time(
                lambda: kernels.local_moments(zs, ys, ze, hs, backend=name), repeat)
        diff = max(np.abs(res["cython"][0] - res["python"][0]).max(),
                   np.abs(res["cython"][1] - res["python"][1]).max())
        print(f"{N:>7} {ze.size:>5} {1e3 * times['cython']:>10.3f} {1e3 * times['python']:>10.3f}"
              f" {times['python'] / times['cython']:>8.1f} {diff:>10.2e}")


def bench_sweep(repeat: int) -> None:
    ds = generate_sim_dataset(SimDesign(), 0)
    for name in ("cython", "python"):
        plan = SmootherPlan(ds, 0.05, backend=name)
        u = np.random.default_rng(1).standard_normal((plan.active_index.size, 3))
        t = _median_time(lambda: plan.smooth(u), repeat)
        print(f"smoothing pass ({name}): {1e3 * t:.3f} ms")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--columns", type=int, default=3)
    args = ap.parse_args(argv)
    if "cython" not in _available():
        print("compiled extension not built; nothing to compare")
        return
    bench_moments([200, 1000, 5000, 20000], args.columns, args.repeat)
    bench_sweep(args.repeat)


def _available():
    out = ["python"]
    try:
        kernels.get_backend("cython")
        out.append("cython")
    except ImportError:
        pass
    return out


if __name__ == "__main__":
    main()
