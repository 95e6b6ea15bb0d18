"""Hot convolution kernels.

Two interchangeable backends compute the same quantities:

* ``numba``: explicit loops compiled with ``@njit``; batch-parallel for the
  forward and input-gradient passes, filter-parallel for the weight gradient,
  so no two threads ever write the same output cell.
* ``numpy``: im2col via ``sliding_window_view`` and ``einsum``.

The backend is chosen once at import time. Set ``SHARPPOISON_DISABLE_NUMBA=1``
to force the numpy path (or if numba is not importable). The two backends
agree to rounding error but not bitwise, so bitwise-reproducibility claims
hold within one backend.

``SHARPPOISON_NUM_THREADS`` overrides the numba thread count.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


try:  # pragma: no cover - depends on environment
    if _env_flag("SHARPPOISON_DISABLE_NUMBA"):
        raise ImportError("numba disabled by environment")
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the TBB layer in this environment is too old and warns on every run
        numba.config.THREADING_LAYER = "workqueue"

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"

if HAS_NUMBA and os.environ.get("SHARPPOISON_NUM_THREADS"):  # pragma: no cover
    numba.set_num_threads(int(os.environ["SHARPPOISON_NUM_THREADS"]))


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference path


def conv2d_forward_numpy(x, w, stride):
    k = w.shape[2]
    cols = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,fcij->bfhw", cols, w, optimize=True)


def conv2d_grad_weight_numpy(x, gout, kernel, stride):
    cols = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,bfhw->fcij", cols, gout, optimize=True)


def conv2d_grad_input_numpy(gout, w, input_hw, stride):
    b, _, oh, ow = gout.shape
    _, c, k, _ = w.shape
    gx = np.zeros((b, c, input_hw[0], input_hw[1]))
    for di in range(k):
        for dj in range(k):
            gx[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += np.einsum(
                "bfhw,fc->bchw", gout, w[:, :, di, dj], optimize=True
            )
    return gx


# ---------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _conv2d_forward_nb(x, w, stride):  # pragma: no cover - compiled
        b, c, h, wd = x.shape
        o, _, k, _ = w.shape
        oh = (h - k) // stride + 1
        ow = (wd - k) // stride + 1
        out = np.zeros((b, o, oh, ow))
        for n in prange(b):
            for f in range(o):
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            wv = w[f, ch, di, dj]
                            for i in range(oh):
                                for j in range(ow):
                                    out[n, f, i, j] += x[n, ch, i * stride + di, j * stride + dj] * wv
        return out

    @njit(parallel=True, cache=True)
    def _conv2d_grad_weight_nb(x, gout, k, stride):  # pragma: no cover - compiled
        b, c, _, _ = x.shape
        _, o, oh, ow = gout.shape
        gw = np.zeros((o, c, k, k))
        for f in prange(o):
            for ch in range(c):
                for di in range(k):
                    for dj in range(k):
                        acc = 0.0
                        for n in range(b):
                            for i in range(oh):
                                for j in range(ow):
                                    acc += x[n, ch, i * stride + di, j * stride + dj] * gout[n, f, i, j]
                        gw[f, ch, di, dj] = acc
        return gw

    @njit(parallel=True, cache=True)
    def _conv2d_grad_input_nb(gout, w, h, wd, stride):  # pragma: no cover - compiled
        b, o, oh, ow = gout.shape
        _, c, k, _ = w.shape
        gx = np.zeros((b, c, h, wd))
        for n in prange(b):
            for f in range(o):
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            wv = w[f, ch, di, dj]
                            for i in range(oh):
                                for j in range(ow):
                                    gx[n, ch, i * stride + di, j * stride + dj] += gout[n, f, i, j] * wv
        return gx


# ---------------------------------------------------------------------------
# dispatch


def conv2d_forward(x, w, stride, backend=None):
    """Valid cross-correlation without bias: ``[b,c,h,w] x [o,c,k,k] -> [b,o,oh,ow]``."""
    if (backend or BACKEND) == "numba":
        return _conv2d_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride)
    return conv2d_forward_numpy(x, w, stride)


def conv2d_grad_weight(x, gout, kernel, stride, backend=None):
    if (backend or BACKEND) == "numba":
        return _conv2d_grad_weight_nb(np.ascontiguousarray(x), np.ascontiguousarray(gout), kernel, stride)
    return conv2d_grad_weight_numpy(x, gout, kernel, stride)


def conv2d_grad_input(gout, w, input_hw, stride, backend=None):
    if (backend or BACKEND) == "numba":
        return _conv2d_grad_input_nb(
            np.ascontiguousarray(gout), np.ascontiguousarray(w), input_hw[0], input_hw[1], stride
        )
    return conv2d_grad_input_numpy(gout, w, input_hw, stride)
