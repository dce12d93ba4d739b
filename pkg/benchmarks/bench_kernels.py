"""Compiled vs numpy unfold kernels on the layer shapes of the desk encoder.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 128]

Prints median milliseconds per call for each backend and the speedup, then a
full conv2d forward + backward through the tape with each backend selected.
"""

import argparse
import statistics
import time

import numpy as np

from simtriplet import _kernels_py, autodiff as ad, kernels

try:
    from simtriplet import _kernels as compiled
except ImportError:
    compiled = None

# (channels, spatial, stride) for the 3x3 convolutions of the tiny encoder at 32 px input
SHAPES = [(3, 32, 2), (16, 16, 1), (32, 8, 1), (64, 4, 1), (128, 2, 1)]


def _median_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def _conv_step(x, k):
    xt = ad.Tensor(x, grad_enabled=True)
    kt = ad.parameter(k)
    with ad.Tape() as tape:
        out = ad.conv2d(xt, kt, 1, 1)
        tape.backward(ad.tsum(out), wrt=[xt, kt])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'shape':<22}{'op':<8}{'cython ms':>11}{'python ms':>11}{'speedup':>9}")
    for c, s, stride in SHAPES:
        x = rng.standard_normal((args.batch, c, s, s)).astype(np.float32)
        cols = compiled.im2col(x, 3, 3, stride, 1)
        label = f"B{args.batch} C{c} {s}x{s} s{stride}"
        for op, fc, fp in (
            ("im2col", lambda: compiled.im2col(x, 3, 3, stride, 1), lambda: _kernels_py.im2col(x, 3, 3, stride, 1)),
            ("col2im", lambda: compiled.col2im(cols, x.shape, 3, 3, stride, 1),
             lambda: _kernels_py.col2im(cols, x.shape, 3, 3, stride, 1)),
        ):
            tc, tp = _median_ms(fc, args.repeat), _median_ms(fp, args.repeat)
            print(f"{label:<22}{op:<8}{tc:>11.2f}{tp:>11.2f}{tp / tc:>8.2f}x")
    x = rng.standard_normal((args.batch, 16, 16, 16)).astype(np.float32)
    k = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    saved = kernels._compiled
    try:
        tc = _median_ms(lambda: _conv_step(x, k), args.repeat)
        kernels._compiled = None
        tp = _median_ms(lambda: _conv_step(x, k), args.repeat)
    finally:
        kernels._compiled = saved
    print(f"{'conv2d fwd+bwd B' + str(args.batch) + ' 16ch 16x16':<30}{tc:>11.2f}{tp:>11.2f}{tp / tc:>8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
