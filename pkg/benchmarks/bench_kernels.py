"""Numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeats 5]

Each case checks that both paths agree before timing them.  With
RVQDIFF_DISABLE_NUMBA=1 (or numba missing) only the numpy column is filled.
"""

import argparse
import time

import numpy as np

from rvqdiff import _accel, kernels
from rvqdiff.synth import SynthConfig, enumerate_toy_distribution


def best_of(fn, repeats):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    toy = enumerate_toy_distribution(SynthConfig(n_real=4, levels=2, length=3)).unconditional
    sup = toy.flat_support
    xt = np.where(rng.random((512, sup.shape[1])) < 0.5, 4, sup[rng.integers(len(sup), size=512)])
    yield "clean_posterior 4096x512", kernels._posterior_numba, kernels._posterior_numpy, (sup, toy.probs, xt, 4, 4)

    probs = rng.dirichlet(np.ones(9), size=200_000)
    yield "categorical 200k x 9", kernels._categorical_numba, kernels._categorical_numpy, (probs, rng.random(200_000))

    N, d, n = 2048, 64, 16
    dist = rng.dirichlet(np.ones(n), size=(N, d))
    args = (dist, np.full(N, 0.25), rng.random((N, d)), rng.random((N, d)))
    yield "runs 2048 x 64 x 16", kernels._runs_numba, kernels._runs_numpy, args


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"numba in use: {_accel.USE_NUMBA}")
    print(f"{'kernel':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, fast, slow, inputs in cases(rng):
        t_np = best_of(lambda: slow(*inputs), args.repeats)
        if _accel.USE_NUMBA:
            a, b = fast(*inputs), slow(*inputs)
            for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-300)
            t_nb = best_of(lambda: fast(*inputs), args.repeats)
            print(f"{name:<28}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<28}{t_np * 1e3:>12.2f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
