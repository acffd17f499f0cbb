"""Hot numeric kernels for 2D cross-correlation (stride 1, zero padding).

The k=3 convolution inner loops dominate training time, so they come in
two interchangeable implementations:

- ``numba``: jitted im2col (padding fused into the loop) feeding a BLAS
  matmul, compiled once and cached;
- ``numpy``: ``sliding_window_view`` plus matmul, no compilation step.

1x1 kernels need no window gathering at all; both backends share a
reshape + matmul fast path for them.

The active backend is chosen at import from the ``DEEPAIR_BACKEND``
environment variable (``"numba"``, ``"numpy"``, or unset for auto: numba
when importable). Both implementations stay exposed so tests and
``benchmarks/bench_kernels.py`` can compare them directly.

All kernels operate on batched float64 arrays shaped [B, C, H, W] and
compute cross-correlation (no kernel flip). Gradients with respect to the
input reuse the forward kernel with a channel-transposed, spatially
flipped weight, which is exact for stride 1 with padding (k-1)/2.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "active_backend",
    "conv2d_forward",
    "conv2d_grad_w",
    "conv2d_grad_x",
    "conv2d_grad_b",
    "BACKENDS",
]


def _pixels_matrix(x: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B*H*W, C] pixel rows (the k=1 'im2col')."""
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, c)


def _conv1x1_forward(x, w, bias):
    b, c, h, wd = x.shape
    o = w.shape[0]
    out = _pixels_matrix(x) @ w.reshape(o, c).T + bias
    return np.ascontiguousarray(out.reshape(b, h, wd, o).transpose(0, 3, 1, 2))


def _conv1x1_grad_w(x, grad_out):
    o = grad_out.shape[1]
    go = _pixels_matrix(grad_out)
    return (go.T @ _pixels_matrix(x)).reshape(o, x.shape[1], 1, 1)


def _im2col_numpy(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    """Padded sliding windows: [B,C,H,W] -> [B*H*W, C*k*k]."""
    b, c = x.shape[0], x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B,C,H,W,k,k]
    h, w = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * h * w, c * k * k
    )


def _conv2d_forward_impl(im2col, x, w, bias, padding):
    bs, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    if k == 1:
        return _conv1x1_forward(x, w, bias)
    cols = im2col(x, k, padding)
    w2 = np.ascontiguousarray(w.reshape(o, c * k * k).T)
    out = cols @ w2 + bias
    return np.ascontiguousarray(out.reshape(bs, h, wd, o).transpose(0, 3, 1, 2))


def _conv2d_grad_w_impl(im2col, x, grad_out, k, padding):
    if k == 1:
        return _conv1x1_grad_w(x, grad_out)
    bs, c, h, wd = x.shape
    o = grad_out.shape[1]
    cols = im2col(x, k, padding)
    go = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(bs * h * wd, o)
    return (go.T @ cols).reshape(o, c, k, k)


def conv2d_forward_numpy(x, w, b, padding):
    return _conv2d_forward_impl(_im2col_numpy, x, w, b, padding)


def conv2d_grad_w_numpy(x, grad_out, k, padding):
    return _conv2d_grad_w_impl(_im2col_numpy, x, grad_out, k, padding)


try:  # numba backend: padding and window gather in one jitted loop nest
    from numba import njit

    @njit(cache=True)
    def _gather_cols(x, k, padding):  # pragma: no cover - used via dispatch
        bs, c, h, w = x.shape
        hp, wp = h + 2 * padding, w + 2 * padding
        xp = np.zeros((bs, c, hp, wp))
        for bi in range(bs):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        xp[bi, ci, i + padding, j + padding] = x[bi, ci, i, j]
        cols = np.empty((bs * h * w, c * k * k))
        for bi in range(bs):
            for i in range(h):
                for j in range(w):
                    row = (bi * h + i) * w + j
                    col = 0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                cols[row, col] = xp[bi, ci, i + di, j + dj]
                                col += 1
        return cols

    def _im2col_numba(x, k, padding):
        return _gather_cols(np.ascontiguousarray(x), k, padding)

    def conv2d_forward_numba(x, w, b, padding):
        return _conv2d_forward_impl(_im2col_numba, x, w, b, padding)

    def conv2d_grad_w_numba(x, grad_out, k, padding):
        return _conv2d_grad_w_impl(_im2col_numba, x, grad_out, k, padding)

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    conv2d_forward_numba = None
    conv2d_grad_w_numba = None
    _HAVE_NUMBA = False


def _select_backend() -> str:
    choice = os.environ.get("DEEPAIR_BACKEND", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"DEEPAIR_BACKEND must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("DEEPAIR_BACKEND=numba requested but numba is not importable")
    if choice == "":
        choice = "numba" if _HAVE_NUMBA else "numpy"
    return choice


_BACKEND = _select_backend()

BACKENDS = {
    "numpy": (conv2d_forward_numpy, conv2d_grad_w_numpy),
}
if _HAVE_NUMBA:
    BACKENDS["numba"] = (conv2d_forward_numba, conv2d_grad_w_numba)

conv2d_forward, conv2d_grad_w = BACKENDS[_BACKEND]


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _BACKEND


def conv2d_grad_x(grad_out: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Gradient w.r.t. the convolution input.

    Equals a forward pass over grad_out with the kernel transposed across
    channels and flipped spatially (valid for stride 1, padding (k-1)/2).
    """
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    zero_bias = np.zeros(wt.shape[0])
    return conv2d_forward(grad_out, wt, zero_bias, padding)


def conv2d_grad_b(grad_out: np.ndarray) -> np.ndarray:
    return grad_out.sum(axis=(0, 2, 3))
