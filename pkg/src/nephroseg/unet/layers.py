"""Numpy layer kernels with hand-written backward passes.

Activations are channels-last: ``(N, X, Y, Z, C)``.  Weights follow the
``(C_out, C_in, kx, ky, kz)`` layout for convolutions and
``(C_in, C_out, 2, 2, 2)`` for the stride-2 transposed convolution.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3_forward(x, w, b):
    """3x3x3 same-padded convolution. Returns ``(y, cols)``; ``cols`` feeds backward."""
    n, sx, sy, sz, cin = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3)).reshape(n * sx * sy * sz, cin * 27)
    y = cols @ w.reshape(cout, cin * 27).T + b
    return y.reshape(n, sx, sy, sz, cout), cols


def conv3_backward(dy, cols, w, x_shape, need_dx=True):
    n, sx, sy, sz, cin = x_shape
    cout = w.shape[0]
    dflat = dy.reshape(-1, cout)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # input gradient is a same-padded convolution of dy with the flipped,
    # channel-transposed kernel
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx, _ = conv3_forward(dy, w_t, 0)
    return dx, dw, db


def conv1_forward(x, w, b):
    """1x1x1 convolution; ``w`` is ``(C_out, C_in)``."""
    return x @ w.T + b


def conv1_backward(dy, x, w):
    cout = w.shape[0]
    dflat = dy.reshape(-1, cout)
    dw = dflat.T @ x.reshape(-1, w.shape[1])
    return dy @ w, dw, dflat.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, y):
    return dy * (y > 0)


def _blocks(x):
    n, sx, sy, sz, c = x.shape
    v = x.reshape(n, sx // 2, 2, sy // 2, 2, sz // 2, 2, c)
    return v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, sx // 2, sy // 2, sz // 2, c, 8)


def maxpool_forward(x):
    """2x2x2 max-pool. Returns ``(y, argmax)``; ties route to the first maximum."""
    blocks = _blocks(x)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(dy, arg, x_shape):
    n, sx, sy, sz, c = x_shape
    dblocks = np.zeros(dy.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
    d = dblocks.reshape(n, sx // 2, sy // 2, sz // 2, c, 2, 2, 2)
    return d.transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(x_shape)


def upconv_forward(x, w, b):
    """2x2x2 stride-2 transposed convolution doubling each spatial axis."""
    n, sx, sy, sz, cin = x.shape
    cout = w.shape[1]
    y = x.reshape(-1, cin) @ w.reshape(cin, cout * 8)
    y = y.reshape(n, sx, sy, sz, cout, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return y.reshape(n, 2 * sx, 2 * sy, 2 * sz, cout) + b


def upconv_backward(dy, x, w):
    n, sx, sy, sz, cin = x.shape
    cout = w.shape[1]
    d = dy.reshape(n, sx, 2, sy, 2, sz, 2, cout).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    dflat = d.reshape(-1, cout * 8)
    xflat = x.reshape(-1, cin)
    dw = (xflat.T @ dflat).reshape(w.shape)
    dx = (dflat @ w.reshape(cin, cout * 8).T).reshape(x.shape)
    db = dy.reshape(-1, cout).sum(axis=0)
    return dx, dw, db


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))
