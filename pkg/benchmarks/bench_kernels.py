"""Throughput comparison of the numba kernels against the numpy
fallback on workload-shaped inputs.

Run from the repository root::

    python3 benchmarks/bench_kernels.py [--repeats N]

Each kernel runs once for warm-up (numba compiles lazily), then the
median wall time over N repeats is reported per backend.
"""

import argparse
import time

import numpy as np

from posevox import kernels


def bench(fn, repeats):
    fn()  # warm-up: triggers JIT compilation on the numba path
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def make_cases(rng):
    """(name, callable) pairs sized like the coarse-grid pipeline."""
    K, H, W = 15, 192, 192
    n_anchors = 80 * 80 * 20
    values = rng.random((K, H, W)).astype(np.float32)
    us = rng.uniform(-20.0, W + 20.0, n_anchors)
    vs = rng.uniform(-20.0, H + 20.0, n_anchors)
    valid = rng.random(n_anchors) > 0.1
    accum = np.zeros((K, n_anchors), dtype=np.float32)

    n_peaks = 45
    channels = np.zeros((K, H, W), dtype=np.float32)
    ks = rng.integers(0, K, n_peaks)
    pus = rng.uniform(0.0, W - 1.0, n_peaks)
    pvs = rng.uniform(0.0, H - 1.0, n_peaks)
    amps = rng.uniform(0.3, 1.0, n_peaks)

    x = rng.normal(0.0, 1.0, (16, 40, 40, 10)).astype(np.float32)
    wters = rng.normal(0.0, 0.1, (16, 16, 3, 3, 3)).astype(np.float32)
    b = rng.normal(0.0, 0.1, 16).astype(np.float32)
    dy = rng.normal(0.0, 1.0, (16, 40, 40, 10)).astype(np.float32)

    scores = rng.random((80, 80, 20))

    return [
        (
            "bilinear_accumulate (15ch, 128k anchors)",
            lambda: kernels.bilinear_accumulate(values, us, vs, valid, accum),
        ),
        (
            "render_gaussian_peaks (45 peaks, 192^2)",
            lambda: kernels.render_gaussian_peaks(
                channels, ks, pus, pvs, amps, 3.0
            ),
        ),
        (
            "conv3d_forward (16->16, 40x40x10, k=3)",
            lambda: kernels.conv3d_forward(x, wters, b, 1, 1),
        ),
        (
            "conv3d_backward_input (same shape)",
            lambda: kernels.conv3d_backward_input(
                dy, wters, 1, 1, (40, 40, 10)
            ),
        ),
        (
            "conv3d_backward_params (same shape)",
            lambda: kernels.conv3d_backward_params(x, dy, 3, 1, 1),
        ),
        (
            "nms_peak_mask (80x80x20)",
            lambda: kernels.nms_peak_mask(scores),
        ),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        rng = np.random.default_rng(0)
        for name, fn in make_cases(rng):
            results.setdefault(name, {})[backend] = bench(fn, args.repeats)

    both = {"numpy", "numba"} <= set(backends)
    width = max(len(n) for n in results)
    header = f"{'kernel':<{width}}" + "".join(
        f"  {b + ' (ms)':>12}" for b in backends
    )
    if both:
        header += f"  {'numba speedup':>14}"
    print(header)
    print("-" * len(header))
    for name, times in results.items():
        row = f"{name:<{width}}" + "".join(
            f"  {1e3 * times[b]:>12.3f}" for b in backends
        )
        if both:
            row += f"  {times['numpy'] / times['numba']:>13.1f}x"
        print(row)


if __name__ == "__main__":
    main()
