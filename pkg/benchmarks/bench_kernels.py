"""Numba vs numpy kernel timings.

Times each kernel in isolation plus one conv2d + maxpool forward/backward
step, on both backends, and checks the outputs agree before timing.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from rgbdsal import kernels as K
from rgbdsal import tensor as T

SHAPES = [(4, 3, 32, 32), (4, 16, 32, 32), (4, 32, 64, 64)]


def timeit(fn, repeat):
    fn()  # warm-up, triggers JIT compilation
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(shape, rng):
    x = rng.normal(size=shape)
    b, c, h, w = shape
    cols = K.np_im2col(x, 3, 3, 1, 1)
    _, arg = K.np_maxpool2x2(x)
    g = rng.normal(size=(b, c, h // 2, w // 2))
    weight = rng.normal(size=(16, c, 3, 3)) * 0.1

    def step():
        xt = T.Tensor(x, requires_grad=True)
        wt = T.Tensor(weight, requires_grad=True)
        y = T.maxpool2d(T.relu(T.conv2d(xt, wt, padding=1)))
        T.backward(T.sum_all(y))
        return xt.grad

    return {
        "im2col": lambda: K.im2col(x, 3, 3, 1, 1),
        "col2im": lambda: K.col2im(cols, shape, 3, 3, 1, 1),
        "maxpool2x2": lambda: K.maxpool2x2(x)[0],
        "maxpool2x2_backward": lambda: K.maxpool2x2_backward(g, arg, shape),
        "conv+pool step": step,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    prev = K.backend()
    rng = np.random.default_rng(0)
    print(f"{'shape':<18} {'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    try:
        for shape in SHAPES:
            fns = cases(shape, rng)
            for name, fn in fns.items():
                out, times = {}, {}
                for b in ("numpy", "numba"):
                    K.set_backend(b)
                    out[b] = fn()
                    times[b] = timeit(fn, args.repeat)
                assert np.allclose(out["numpy"], out["numba"]), name
                print(f"{str(shape):<18} {name:<20} {1e3 * times['numpy']:>10.3f} "
                      f"{1e3 * times['numba']:>10.3f} {times['numpy'] / times['numba']:>7.2f}x")
    finally:
        K.set_backend(prev)


if __name__ == "__main__":
    main()
