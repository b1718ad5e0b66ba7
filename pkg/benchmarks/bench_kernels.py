"""Time the numba and numpy paths of the hot kernels on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per (kernel, size, path) with the best wall time and the
max absolute difference between the two paths.
"""
import argparse
import time

import numpy as np

from maplab import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def crop_case(n, size, rng):
    images = rng.uniform(size=(n, size, size, 3)).astype(np.float32)
    boxes = []
    for _ in range(n):
        h, w = rng.integers(size // 4, size + 1, 2)
        boxes.append((rng.integers(0, size - h + 1), rng.integers(0, size - w + 1), h, w))
    boxes = np.array(boxes, dtype=np.int64)
    return (lambda: kernels.crop_resize_numpy(images, boxes, size, size),
            lambda: kernels.crop_resize_numba(images, boxes, size, size))


def lowess_case(n, rng):
    x = np.sort(rng.uniform(0, 100, n))
    y = np.sin(x / 5) + rng.normal(0, 0.1, n)
    k = int(np.ceil(0.1 * n))
    return (lambda: kernels.lowess_sorted_numpy(x, y, k),
            lambda: kernels.lowess_sorted_numba(x, y, k))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not kernels.USE_NUMBA:
        raise SystemExit("numba path disabled (MAPLAB_DISABLE_NUMBA set or numba missing); nothing to compare")
    rng = np.random.default_rng(0)
    cases = [(f"crop_resize n=128 {s}x{s}", *crop_case(128, s, rng)) for s in (32, 64)]
    cases += [(f"lowess n={n}", *lowess_case(n, rng)) for n in (1000, 10000, 50000)]
    print(f"{'kernel':<28}{'numpy s':>12}{'numba s':>12}{'speedup':>10}{'max diff':>12}")
    for name, np_fn, nb_fn in cases:
        nb_fn()  # compile outside the timed region
        t_np, a = best_of(np_fn, args.repeat)
        t_nb, b = best_of(nb_fn, args.repeat)
        print(f"{name:<28}{t_np:>12.5f}{t_nb:>12.5f}{t_np / t_nb:>10.1f}{np.abs(a - b).max():>12.2e}")


if __name__ == "__main__":
    main()
