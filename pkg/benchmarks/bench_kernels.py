"""Compare the numba and numpy kernel paths on training-shaped workloads.

Run twice, once per backend:

    CTXSEG_BACKEND=numpy python benchmarks/bench_kernels.py
    CTXSEG_BACKEND=numba python benchmarks/bench_kernels.py

The numba path pays a one-time JIT cost (reported separately); steady-state
timings are medians over repeats.
"""

import time

import numpy as np

from ctxseg import kernels


def timeit(fn, repeats=20):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    rng = np.random.default_rng(0)
    print(f"backend: {kernels.BACKEND}")
    cases = [
        # (N, Cin, H, W, Cout, k, stride, pad) as they appear in the default net
        (16, 3, 32, 32, 16, 3, 1, 1),
        (16, 16, 16, 16, 32, 3, 1, 1),
        (16, 32, 8, 8, 64, 3, 1, 1),
        (16, 128, 8, 8, 64, 3, 1, 1),
        (16, 128, 4, 4, 64, 1, 1, 0),
        (64, 3, 32, 32, 16, 3, 1, 1),
    ]
    total_fwd = total_bwd = 0.0
    for (n, cin, h, w, cout, k, stride, pad) in cases:
        x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
        wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        gy = rng.standard_normal(kernels.conv2d_forward(x, wt, b, stride, pad).shape).astype(np.float32)
        t_f = timeit(lambda: kernels.conv2d_forward(x, wt, b, stride, pad))
        t_b = timeit(lambda: kernels.conv2d_backward(x, wt, stride, pad, gy))
        total_fwd += t_f
        total_bwd += t_b
        macs = n * cout * (h // stride) * (w // stride) * cin * k * k
        print(
            f"conv {n}x{cin}x{h}x{w} -> {cout} ({k}x{k}/s{stride}): "
            f"fwd {t_f * 1e3:7.3f} ms ({2 * macs / t_f / 1e9:6.1f} GFLOP/s)  "
            f"bwd {t_b * 1e3:7.3f} ms"
        )
    x = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    t_p = timeit(lambda: kernels.maxpool2d_forward(x))
    y, idx = kernels.maxpool2d_forward(x)
    gy = rng.standard_normal(y.shape).astype(np.float32)
    t_pb = timeit(lambda: kernels.maxpool2d_backward(x.shape, idx, gy))
    print(f"maxpool 16x32x16x16: fwd {t_p * 1e3:.3f} ms  bwd {t_pb * 1e3:.3f} ms")
    print(f"conv totals: fwd {total_fwd * 1e3:.2f} ms  bwd {total_bwd * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
