"""Hot inner loops for convolution and pooling.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version.  Set ``DIVKD_DISABLE_NUMBA=1`` before import to force the numpy
path (or if numba is not installed).  Both paths compute identical values;
summation order inside the kernels is the same, so results agree to the
last bit for im2col/col2im/maxpool (these only copy, add and compare).
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("DIVKD_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in subprocess test
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_numpy(xp, k, stride, ho, wo):
    """Unfold a padded batch ``(B, C, Hp, Wp)`` to ``(C*k*k, B*ho*wo)``."""
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            cols[:, i, j] = xt[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(c * k * k, b * ho * wo)


def col2im_numpy(cols, b, c, hp, wp, k, stride, ho, wo):
    """Adjoint of :func:`im2col_numpy`; overlapping windows are summed."""
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def maxpool2_numpy(x):
    """2x2/stride-2 max pool. Returns (out, argmax in 0..3); ties pick the first."""
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64)


def maxpool2_backward_numpy(grad, idx, h, w):
    b, c, ho, wo = grad.shape
    win = np.zeros((b, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    win = win.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, k, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        L = ho * wo
        cols = np.empty((c * k * k, b * L), dtype=xp.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for n in range(b):
                        for y in range(ho):
                            yy = y * stride + i
                            base = n * L + y * wo
                            for x in range(wo):
                                cols[row, base + x] = xp[n, ch, yy, x * stride + j]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, b, c, hp, wp, k, stride, ho, wo):
        L = ho * wo
        out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
        # same (i, j) accumulation order as the numpy path
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for n in range(b):
                        for y in range(ho):
                            yy = y * stride + i
                            base = n * L + y * wo
                            for x in range(wo):
                                out[n, ch, yy, x * stride + j] += cols[row, base + x]
        return out

    @njit(cache=True)
    def _maxpool2_nb(x):
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        out = np.empty((b, c, ho, wo), dtype=x.dtype)
        idx = np.empty((b, c, ho, wo), dtype=np.int64)
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best = x[n, ch, 2 * y, 2 * xx]
                        arg = 0
                        for q in range(1, 4):
                            v = x[n, ch, 2 * y + q // 2, 2 * xx + q % 2]
                            if v > best:
                                best = v
                                arg = q
                        out[n, ch, y, xx] = best
                        idx[n, ch, y, xx] = arg
        return out, idx

    @njit(cache=True)
    def _maxpool2_backward_nb(grad, idx, h, w):
        b, c, ho, wo = grad.shape
        out = np.zeros((b, c, h, w), dtype=grad.dtype)
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        q = idx[n, ch, y, xx]
                        out[n, ch, 2 * y + q // 2, 2 * xx + q % 2] = grad[n, ch, y, xx]
        return out

    def im2col_numba(xp, k, stride, ho, wo):
        return _im2col_nb(np.ascontiguousarray(xp), k, stride, ho, wo)

    # k*k strided slice copies already run at memory speed and beat the loop
    # (see benchmarks/bench_kernels.py), so im2col stays on numpy
    im2col = im2col_numpy

    def col2im(cols, b, c, hp, wp, k, stride, ho, wo):
        return _col2im_nb(np.ascontiguousarray(cols), b, c, hp, wp, k, stride, ho, wo)

    def maxpool2(x):
        return _maxpool2_nb(np.ascontiguousarray(x))

    def maxpool2_backward(grad, idx, h, w):
        return _maxpool2_backward_nb(np.ascontiguousarray(grad), idx, h, w)

    BACKEND = "numba"

else:
    im2col = im2col_numba = im2col_numpy
    col2im = col2im_numpy
    maxpool2 = maxpool2_numpy
    maxpool2_backward = maxpool2_backward_numpy
    BACKEND = "numpy"
