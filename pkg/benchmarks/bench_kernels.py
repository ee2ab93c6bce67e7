"""Benchmark the affine resampling kernels: numba JIT loop vs the
vectorized numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]
The numpy path is also what you get with KNEEUDA_NO_NUMBA=1.
"""

import argparse
import time

import numpy as np

from kneeuda import kernels


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    cases = [
        ("resize 48^3/2 -> 64^3/2", (48, 48, 24), (64, 64, 32), 1),
        ("resize 128^3/2 -> 96^3/2", (128, 128, 64), (96, 96, 48), 1),
        ("rotate 96^3/2 (10 deg)", (96, 96, 48), (96, 96, 48), 1),
        ("nearest mask 128^3/2 -> 96^3/2", (128, 128, 64), (96, 96, 48), 0),
    ]

    rng = np.random.default_rng(0)
    print(f"numba available/enabled: {kernels.numba_enabled()}")
    print(f"{'case':<34} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name, in_shape, out_shape, order in cases:
        vol = rng.normal(size=in_shape).astype(np.float32)
        if "rotate" in name:
            m, off = kernels.rotation_transform(in_shape, 10.0)
        else:
            m, off = kernels.resize_transform(in_shape, out_shape)

        def run(backend):
            return kernels.affine_sample(vol, m, off, out_shape, order=order,
                                         backend=backend)

        np.testing.assert_allclose(run("numba"), run("numpy"), atol=1e-4)
        run("numba")  # JIT warm-up outside the timed region
        t_nb = time_call(lambda: run("numba"), args.repeats)
        t_np = time_call(lambda: run("numpy"), args.repeats)
        print(f"{name:<34} {t_nb * 1e3:>8.1f}ms {t_np * 1e3:>8.1f}ms "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
