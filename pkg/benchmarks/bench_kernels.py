"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Runs in one process: the numba functions come from the normal import, the
numpy ones are the ``*_numpy`` twins, so both see identical inputs.
"""

import argparse
import timeit

import numpy as np

from divkd import _kernels as K


def cases():
    rng = np.random.default_rng(0)
    # batch of 128 16x16 maps with 16 channels, 3x3 kernel, pad 1: a typical desk-scale conv
    xp = np.pad(rng.standard_normal((128, 16, 16, 16)), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = K.im2col_numpy(xp, 3, 1, 16, 16)
    x = rng.standard_normal((128, 16, 16, 16))
    _, idx = K.maxpool2_numpy(x)
    g = rng.standard_normal((128, 16, 8, 8))
    shape = (128, 16, 18, 18, 3, 1, 16, 16)
    return {
        "im2col": (lambda: K.im2col_numba(xp, 3, 1, 16, 16), lambda: K.im2col_numpy(xp, 3, 1, 16, 16)),
        "col2im": (lambda: K.col2im(cols, *shape), lambda: K.col2im_numpy(cols, *shape)),
        "maxpool2": (lambda: K.maxpool2(x), lambda: K.maxpool2_numpy(x)),
        "maxpool2_backward": (lambda: K.maxpool2_backward(g, idx, 16, 16),
                              lambda: K.maxpool2_backward_numpy(g, idx, 16, 16)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"backend: {K.BACKEND}")
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (fast, slow) in cases().items():
        fast()  # compile
        a = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        b = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{a:>10.2f}{b:>10.2f}{b / a:>8.2f}x")


if __name__ == "__main__":
    main()
