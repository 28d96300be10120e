"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (numba compiles on first call), then the best
of ``--repeat`` timings is reported along with the max abs difference
between the two variants.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fwdguide import _kernels as K


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def cases(rng):
    a = rng.standard_normal((256, 2))
    b = rng.standard_normal((5000, 2))
    yield "pair_dist_sum 256x5000", lambda: K.pair_dist_sum_numba(a, b), lambda: K.pair_dist_sum_numpy(a, b)

    n = 64 * 64
    p0, g = rng.standard_normal(n), rng.standard_normal(n)

    def adam(fn):
        p, m, v = p0.copy(), np.zeros(n), np.zeros(n)
        for step in range(1, 101):
            fn(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, step)
        return p

    yield "adam_update 4096 x100", lambda: adam(K.adam_update_numba), lambda: adam(K.adam_update_numpy)

    x, t = rng.standard_normal(256 * 64), rng.standard_normal(256 * 64)
    yield "relu_mask 16384", lambda: K.relu_mask_numba(x, t), lambda: K.relu_mask_numpy(x, t)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        print("numba not installed; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, fast, ref in cases(rng):
        tf, tr = bench(fast, args.repeat), bench(ref, args.repeat)
        diff = float(np.max(np.abs(np.asarray(fast()) - np.asarray(ref()))))
        print(f"{name:<24}{tf * 1e3:>10.3f}{tr * 1e3:>10.3f}{tr / tf:>9.2f}{diff:>11.2e}")


if __name__ == "__main__":
    main()
