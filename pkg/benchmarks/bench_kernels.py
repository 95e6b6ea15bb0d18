"""Time the numba and numpy convolution kernels on the same inputs.

    python benchmarks/bench_kernels.py [--batch 64] [--size 16] [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` time of each backend,
their ratio, and the largest absolute difference between their outputs.
"""

import argparse
import timeit

import numpy as np

from sharppoison import _kernels as K


def cases(batch, channels, size, filters, kernel, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, channels, size, size))
    w = rng.standard_normal((filters, channels, kernel, kernel))
    oh = K.conv_output_size(size, kernel, stride)
    gout = rng.standard_normal((batch, filters, oh, oh))
    return {
        "forward": lambda b: K.conv2d_forward(x, w, stride, backend=b),
        "grad_weight": lambda b: K.conv2d_grad_weight(x, gout, kernel, stride, backend=b),
        "grad_input": lambda b: K.conv2d_grad_input(gout, w, (size, size), stride, backend=b),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--filters", type=int, default=8)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    if not K.HAS_NUMBA:
        print("numba unavailable (or disabled); only the numpy backend can be timed")
    backends = ["numpy"] + (["numba"] if K.HAS_NUMBA else [])
    kernels = cases(args.batch, args.channels, args.size, args.filters, args.kernel, args.stride)
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in kernels.items():
        times, outs = {}, {}
        for b in backends:
            outs[b] = fn(b)  # warm-up, includes compilation
            times[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3
        if "numba" in times:
            diff = float(np.max(np.abs(outs["numba"] - outs["numpy"])))
            print(f"{name:<12} {times['numpy']:>10.3f} {times['numba']:>10.3f} {times['numpy'] / times['numba']:>8.2f} {diff:>11.2e}")
        else:
            print(f"{name:<12} {times['numpy']:>10.3f} {'-':>10} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
