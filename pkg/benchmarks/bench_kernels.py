"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and workload with the best-of-N time of each
backend and the speedup.  Results are checked for agreement before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tgsage.kernels import available_backends


def workloads(rng):
    rdm_small = rng.normal(size=(50, 128))
    rdm_large = rng.normal(size=(256, 512))
    sq = [rng.random((n, n)) for n in (64, 256)]
    codes = rng.integers(-1, 6, size=5000)
    weights = rng.random(5000)
    draw_codes = rng.integers(-1, 4, size=(24, 40))
    log_ratio = rng.normal(size=(40, 4))
    return [
        ("correlation_rdm", "50x128", (rdm_small,)),
        ("correlation_rdm", "256x512", (rdm_large,)),
        ("upper_pearson", "64x64", (sq[0], sq[0].T.copy())),
        ("upper_pearson", "256x256", (sq[1], sq[1].T.copy())),
        ("weighted_choice_counts", "n=5000", (codes, weights, 6)),
        ("draw_log_ratio", "24 draws x 40 dims", (draw_codes, log_ratio)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'workload':<20}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for kernel, label, inputs in workloads(rng):
        results = {name: getattr(mod, kernel)(*inputs) for name, mod in backends.items()}
        ref = results["python"]
        for name, value in results.items():
            if not np.allclose(value, ref, rtol=1e-10, atol=1e-12):
                raise SystemExit(f"{kernel}: backend {name} disagrees with python")
        times = {}
        for name, mod in backends.items():
            fn = getattr(mod, kernel)
            timer = timeit.Timer(lambda: fn(*inputs))
            number, _ = timer.autorange()
            times[name] = min(timer.repeat(args.repeat, number)) / number
        speed = f"{times['python'] / times['cython']:>9.1f}x" if "cython" in times else f"{'':>10}"
        print(f"{kernel:<24}{label:<20}" + "".join(f"{t * 1e6:>10.1f}us" for t in times.values()) + speed)


if __name__ == "__main__":
    main()
