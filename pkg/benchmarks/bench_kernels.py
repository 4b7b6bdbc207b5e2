"""Time the calibration kernels on the numba and numpy paths.

    python benchmarks/bench_kernels.py [--n 2000] [--horizon 15] [--repeat 20]

Both paths are imported from the same module; the numba path is skipped when
numba is unavailable. Results are also checked for agreement.
"""

import argparse
import time

import numpy as np

from cpsls import _accel


def make_problem(n, horizon, n_x=4, n_u=2, seed=0):
    rng = np.random.default_rng(seed)
    points = rng.uniform(-5, 5, size=(n, n_x + n_u))
    residuals = 0.05 * rng.standard_normal((n, n_x))
    A = rng.standard_normal((horizon, n_x, n_x))
    Ls = np.tril(A) + 3.0 * np.eye(n_x)
    queries = rng.uniform(-5, 5, size=(horizon, n_x + n_u))
    levels = np.full(horizon, 1.0 - 0.1 / 15)
    return Ls, queries, points, residuals, 0.97, levels


def timeit(fn, args, repeat):
    fn(*args)  # warm-up (triggers JIT compilation)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--horizon", type=int, default=15)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    prob = make_problem(args.n, args.horizon)
    paths = {"numpy": _accel.calibrate_batch_np}
    if _accel.HAS_NUMBA:
        paths["numba"] = _accel.calibrate_batch_nb
    ref = None
    print(f"calibrate_batch: n={args.n} horizon={args.horizon} (best of {args.repeat})")
    for name, fn in paths.items():
        ms = timeit(fn, prob, args.repeat)
        out = fn(*prob)
        if ref is None:
            ref = out
        agree = np.allclose(out, ref, rtol=1e-12, atol=1e-12)
        print(f"  {name:<6} {ms:8.3f} ms  matches numpy: {agree}")


if __name__ == "__main__":
    main()
