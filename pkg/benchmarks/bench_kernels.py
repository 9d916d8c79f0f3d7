"""Time the numba kernels against their numpy twins at training-step sizes.

    python benchmarks/bench_kernels.py [--repeat 50]

The first numba call (compilation, or loading the on-disk cache) is excluded.
Each pair is also checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from stfer import kernels


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # attention scores of one desk step: batch 32, 4 heads, 26 slots
    x = rng.normal(size=(32 * 4 * 26, 26))
    x[:, -6:] = -np.inf
    y = kernels.softmax_rows_numpy(x)
    dy = rng.normal(size=x.shape)
    # token features: 32 x 26 tokens, D = 64
    t = rng.normal(size=(32 * 26, 64))
    g, b = rng.normal(size=64), rng.normal(size=64)
    _, xhat, rstd = kernels.layer_norm_rows_numpy(t, g, b, 1e-6)
    dt = rng.normal(size=t.shape)
    # one scenario of the desk test split, all-vs-all
    dist = rng.random((960, 960))
    dist[rng.random(dist.shape) < 0.5] = np.inf
    ids = rng.integers(0, 20, 960)
    matches = ids[:, None] == ids[None, :]
    return [
        ("softmax_rows", kernels.softmax_rows_numpy, kernels.softmax_rows_numba, (x,)),
        ("softmax_rows_backward", kernels.softmax_rows_backward_numpy, kernels.softmax_rows_backward_numba, (y, dy)),
        ("layer_norm_rows", kernels.layer_norm_rows_numpy, kernels.layer_norm_rows_numba, (t, g, b, 1e-6)),
        ("layer_norm_rows_backward", kernels.layer_norm_rows_backward_numpy,
         kernels.layer_norm_rows_backward_numba, (dt, xhat, rstd, g)),
        ("rank_queries", kernels.rank_queries_numpy, kernels.rank_queries_numba, (dist, matches)),
    ]


def agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.nanmax(np.abs(np.asarray(u, float) - np.asarray(v, float)))) for u, v in zip(a, b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, f_np, f_nb, a in cases(rng):
        diff = agree(f_np(*a), f_nb(*a))
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a, args.repeat)
        print(f"{name:<26}{1e3 * t_np:10.3f}{1e3 * t_nb:10.3f}{t_np / t_nb:9.2f}{diff:11.1e}")


if __name__ == "__main__":
    main()
