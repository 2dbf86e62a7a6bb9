"""Forward/backward kernels on plain ndarrays.

Every ``*_forward`` returns its output together with a cache; the matching
``*_backward`` consumes the upstream gradient and that cache. Images and
feature maps are NHWC, convolution weights are (kh, kw, c_in, c_out).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, LabelOutOfRange, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def affine_forward(x, w, b):
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"affine: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b, (x, w)


def affine_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding for ceil-mode "same" windows."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _windows(xp, kh, kw, stride, oh, ow):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :oh, :ow]  # (B, oh, ow, C, kh, kw)


def conv2d_forward(x, w, stride=1, padding="same"):
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        oh, pt, pb = same_padding(h, kh, stride)
        ow, pl, pr = same_padding(wd, kw, stride)
    elif padding == "valid":
        if h < kh or wd < kw:
            raise ShapeMismatch(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    pads = ((0, 0), (pt, pb), (pl, pr), (0, 0))
    xp = np.pad(x, pads) if pt or pb or pl or pr else x
    if kh == kw == 1:
        cols = xp[:, ::stride, ::stride][:, :oh, :ow].reshape(-1, c)
    else:
        win = _windows(xp, kh, kw, stride, oh, ow)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    y = (cols @ w.reshape(-1, cout)).reshape(n, oh, ow, cout)
    return y, (x.shape, xp.shape, (pt, pl), stride, cols, w)


def conv2d_backward(dy, cache, need_dx=True):
    """Returns (dx, dw); dx is None when ``need_dx`` is false."""
    xshape, xpshape, (pt, pl), stride, cols, w = cache
    kh, kw, c, cout = w.shape
    n, oh, ow, _ = dy.shape
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (dy2 @ w.reshape(-1, cout).T).reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += dcols[:, :, :, i, j]
    dx = dxp[:, pt:pt + xshape[1], pl:pl + xshape[2]]
    return dx, dw


def max_pool_forward(x, kernel=3, stride=2):
    n, h, wd, c = x.shape
    oh, pt, pb = same_padding(h, kernel, stride)
    ow, pl, pr = same_padding(wd, kernel, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, kernel, kernel, stride, oh, ow).reshape(n, oh, ow, c, kernel * kernel)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, xp.shape, (pt, pl), kernel, stride, arg)


def max_pool_backward(dy, cache):
    xshape, xpshape, (pt, pl), k, stride, arg = cache
    n, oh, ow, c = dy.shape
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += dy * hit
    return dxp[:, pt:pt + xshape[1], pl:pl + xshape[2]]


def batch_norm_forward(x, gamma, beta, training, running_mean, running_var,
                       momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalise over every axis but the last.

    Returns ``(y, cache, new_running_mean, new_running_var)``; running
    statistics only change in training mode.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeMismatch(f"batch_norm: x {x.shape}, gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        count = x.size // x.shape[-1]
        if count < 2:
            raise DegenerateBatch("batch norm in training mode needs at least 2 rows")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean = momentum * running_mean + (1.0 - momentum) * mean
        running_var = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma, training), running_mean, running_var


def batch_norm_backward(dy, cache):
    xhat, inv, gamma, training = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if not training:
        return dxhat * inv, dgamma, dbeta
    count = dy.size // dy.shape[-1]
    dx = inv / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def lstm_cell_forward(x, h, c, w, b):
    """One LSTM step. ``w`` is (D + H, 4H) with gate blocks ordered i, f, o, g."""
    hidden = h.shape[-1]
    if w.shape != (x.shape[-1] + hidden, 4 * hidden) or c.shape != h.shape:
        raise ShapeMismatch(f"lstm: x {x.shape}, h {h.shape}, c {c.shape}, w {w.shape}")
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ w + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    o = sigmoid(z[..., 2 * hidden:3 * hidden])
    g = np.tanh(z[..., 3 * hidden:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc, w)


class LstmState:
    """Hidden and cell vectors after one LSTM step."""

    __slots__ = ("hidden", "cell")

    def __init__(self, hidden, cell):
        if np.shape(hidden) != np.shape(cell):
            raise ShapeMismatch("hidden and cell state must have equal shape")
        self.hidden = np.asarray(hidden)
        self.cell = np.asarray(cell)


def lstm_cell_step(x, state: LstmState, w, b) -> LstmState:
    h, c, _ = lstm_cell_forward(x, state.hidden, state.cell, w, b)
    return LstmState(h, c)


def lstm_cell_backward(dh, dc, cache):
    """Returns dx, dh_prev, dc_prev, dw, db."""
    xh, c, i, f, o, g, tc, w = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    do = dh * tc
    di = dc * g
    dg = dc * i
    df = dc * c
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=-1)
    dxh = dz @ w.T
    xh2 = xh.reshape(-1, xh.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    dw = xh2.T @ dz2
    db = dz2.sum(axis=0)
    d_in = xh.shape[-1] - i.shape[-1]
    return dxh[..., :d_in], dxh[..., d_in:], dc * f, dw, db


def lstm_sequence_forward(xs, w, b, h0=None, c0=None):
    """Unroll over axis 1 of ``xs`` (B, T, D); returns hidden states (B, T, H)."""
    n, steps, _ = xs.shape
    hidden = w.shape[1] // 4
    h = np.zeros((n, hidden), dtype=xs.dtype) if h0 is None else h0
    c = np.zeros((n, hidden), dtype=xs.dtype) if c0 is None else c0
    hs = np.empty((n, steps, hidden), dtype=xs.dtype)
    caches = []
    for t in range(steps):
        h, c, cache = lstm_cell_forward(xs[:, t], h, c, w, b)
        hs[:, t] = h
        caches.append(cache)
    return hs, caches


def lstm_sequence_backward(dhs, caches):
    """Backpropagation through time; ``dhs`` is the gradient for every hidden state."""
    n, steps, hidden = dhs.shape
    w = caches[0][-1]
    d_in = w.shape[0] - hidden
    dxs = np.empty((n, steps, d_in), dtype=dhs.dtype)
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[1], dtype=w.dtype)
    dh = np.zeros((n, hidden), dtype=dhs.dtype)
    dc = np.zeros((n, hidden), dtype=dhs.dtype)
    for t in range(steps - 1, -1, -1):
        dx, dh, dc, dw_t, db_t = lstm_cell_backward(dh + dhs[:, t], dc, caches[t])
        dxs[:, t] = dx
        dw += dw_t
        db += db_t
    return dxs, dw, db


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n
