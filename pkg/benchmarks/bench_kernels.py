"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and problem size: median seconds for each
backend and the speed-up. Results of the two backends are also checked for
agreement, so a broken kernel cannot post a fast time.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from implicit_align import _kernels
from implicit_align.bilevel import smoothness
from implicit_align.metrics import regression_thresholds
from implicit_align.models import LossKind, augment


def bench(fn, repeat):
    fn()  # warm up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def fit_case(n, k, steps, rng):
    za = augment(rng.normal(size=(n, k)))
    y = za @ rng.normal(size=k + 1) + 0.1 * rng.normal(size=n)
    lr = 1.0 / smoothness(za, LossKind.SQUARE)
    h0 = np.zeros(k + 1)

    def run(use):
        return _kernels.fit_linear_head(za, y, h0, lr, steps, 0.0, _kernels.SQUARE, use_numba=use)

    return run


def counts_case(n, m, rng):
    y, s = rng.normal(size=n), rng.normal(size=n)
    ts = regression_thresholds(s, m)

    def run(use):
        return _kernels.regression_counts(y, s, ts, use_numba=use)

    return run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    cases = [
        ("fit_linear_head n=500 k=4 T=20", fit_case(500, 4, 20, rng)),
        ("fit_linear_head n=500 k=100 T=20", fit_case(500, 100, 20, rng)),
        ("fit_linear_head n=14000 k=100 T=20", fit_case(14000, 100, 20, rng)),
        ("regression_counts n=400 m=33", counts_case(400, 33, rng)),
        ("regression_counts n=4000 m=33", counts_case(4000, 33, rng)),
    ]
    print(f"{'kernel':40s} {'numpy s':>10s} {'numba s':>10s} {'speed-up':>9s}")
    for name, run in cases:
        a, b = run(False), run(True)
        for u, v in zip(a, b):
            if not np.allclose(u, v, rtol=1e-9, atol=1e-12):
                print(f"{name}: backends disagree", file=sys.stderr)
                return 1
        t_np = bench(lambda: run(False), args.repeat)
        t_nb = bench(lambda: run(True), args.repeat)
        print(f"{name:40s} {t_np:10.2e} {t_nb:10.2e} {t_np / t_nb:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
