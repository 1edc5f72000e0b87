"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Numba timings exclude the first (compiling) call.
"""

import argparse
import time

import numpy as np

from latentloc import kernels
from latentloc.nn import FourierConfig


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(rng):
    n = 4096
    x = rng.uniform(-0.5, 0.5, size=(n, 7))
    freqs = FourierConfig().frequencies()
    q1 = rng.normal(size=(n, 4))
    q1 /= np.linalg.norm(q1, axis=1, keepdims=True)
    q2 = rng.normal(size=(n, 4))
    q2 /= np.linalg.norm(q2, axis=1, keepdims=True)
    t = rng.normal(size=(n, 3))
    dt = rng.normal(size=(n, 3))
    de = rng.normal(size=(n, 3)) * 0.1
    m = rng.normal(size=(4, 4))
    sym = m @ m.T
    pts = rng.normal(size=(2000, 3))
    return {
        "fourier_features 4096x7": lambda: kernels.fourier_features(x, freqs),
        "quat_geodesic 4096": lambda: kernels.quat_geodesic(q1, q2),
        "perturb 4096": lambda: kernels.perturb(t, q1, dt, de),
        "target_scores 4096": lambda: kernels.target_scores(t[0], q1[0], t, q2, 5.0, 0.1),
        "jacobi_eigh 4x4": lambda: kernels.jacobi_eigh(sym),
        "nearest_neighbor 2000": lambda: kernels.nearest_neighbor_distances(pts),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in cases(rng).items():
        with kernels.backend("numpy"):
            t_np = _time(fn, args.repeat)
        with kernels.backend("numba"):
            t_nb = _time(fn, args.repeat)
        rows.append((name, t_np, t_nb))
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, a, b in rows:
        print(f"{name:28s} {1e3 * a:10.3f} {1e3 * b:10.3f} {a / b:8.2f}")


if __name__ == "__main__":
    main()
