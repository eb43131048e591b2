"""Time the compiled and NumPy kernel backends on layer-sized problems.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per call for each backend, for the automatic
per-call choice ("auto"), and the speed-up of "auto" over pure NumPy.
"""

import argparse
import statistics
import time

import numpy as np

from gated_res2net import kernels

CASES = [
    # name, x shape, w shape, stride
    ("stem 3x3/2", (16, 1, 432, 400), (16, 1, 3, 3), 2),
    ("group 3x3", (16, 4, 108, 100), (4, 4, 3, 3), 1),
    ("group 3x3 wide", (16, 16, 27, 25), (16, 16, 3, 3), 1),
    ("1x1 expand", (16, 16, 54, 50), (32, 16, 1, 1), 1),
]


def _time(fn, repeat):
    fn()  # warm caches and lazy allocations
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench(repeat: int):
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    rows = []
    for name, xs, ws, stride in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        pad = (ws[2] // 2, ws[3] // 2)
        st = (stride, stride)
        y = kernels.conv2d_forward(x, w, st, pad)
        g = rng.standard_normal(y.shape).astype(np.float32)
        ops = {
            "conv fwd": lambda b: kernels.conv2d_forward(x, w, st, pad, backend=b),
            "conv bwd-input": lambda b: kernels.conv2d_backward_input(g, w, x.shape, st, pad, backend=b),
            "conv bwd-weight": lambda b: kernels.conv2d_backward_weight(g, x, w.shape, st, pad, backend=b),
        }
        for op, fn in ops.items():
            t = {b: _time(lambda: fn(b), repeat) for b in backends + [None]}
            rows.append((f"{name} {op}", t))
    gamma = np.ones(16, np.float32)
    beta = np.zeros(16, np.float32)
    x = rng.standard_normal((16, 16, 108, 100)).astype(np.float32)
    rows.append(("batchnorm+relu fwd",
                 {b: _time(lambda: kernels.batch_norm_forward(x, gamma, beta, 1e-5, True, backend=b), repeat)
                  for b in backends + [None]}))
    return backends, rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    backends, rows = bench(args.repeat)
    print(f"default backend: {kernels.BACKEND}")
    cols = backends + [None]
    head = f"{'kernel':36s}" + "".join(f"{(b or 'auto') + ' ms':>12s}" for b in cols)
    print(head + f"{'auto speed-up':>15s}")
    for name, t in rows:
        line = f"{name:36s}" + "".join(f"{t[b] * 1e3:12.2f}" for b in cols)
        print(line + f"{t['python'] / t[None]:14.1f}x")


if __name__ == "__main__":
    main()
