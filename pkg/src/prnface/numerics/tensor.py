"""A small reverse-mode tape over the kernels in :mod:`functional`.

Each op builds a new :class:`Tensor` holding a closure that pushes the
output gradient back into its parents. Only nodes with a trainable
ancestor record anything, so frozen sub-networks cost forward time only.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteValue, ShapeMismatch
from . import functional as F


_branch_log: list | None = None


@contextmanager
def trace_branches():
    """Collect the branch pattern (ReLU masks, max-pool choices) of every op run inside."""
    global _branch_log
    previous, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


def record_branch(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(pattern))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior node: release memory once consumed
                    node.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("non-finite value produced in forward pass")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y, cache = F.affine_forward(x.data, w.data, b.data)

    def backward(g):
        dx, dw, db = F.affine_backward(g, cache)
        x._accumulate(dx)
        w._accumulate(dw)
        b._accumulate(db)

    return _node(y, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    y, mask = F.relu_forward(x.data)
    record_branch(mask)
    return _node(y, (x,), lambda g: x._accumulate(F.relu_backward(g, mask)))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    y, cache = F.conv2d_forward(x.data, w.data, stride, padding)

    def backward(g):
        dx, dw = F.conv2d_backward(g, cache, need_dx=x.requires_grad)
        if dx is not None:
            x._accumulate(dx)
        w._accumulate(dw)

    return _node(y, (x, w), backward)


def max_pool(x: Tensor, kernel: int = 3, stride: int = 2) -> Tensor:
    y, cache = F.max_pool_forward(x.data, kernel, stride)
    record_branch(cache[-1])
    return _node(y, (x,), lambda g: x._accumulate(F.max_pool_backward(g, cache)))


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pooling over H and W of an NHWC map."""
    n, h, w, c = x.shape
    y = x.data.reshape(n, h * w, c).sum(axis=1) / (h * w)

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy())

    return _node(y, (x,), backward)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    y = x.data.sum(axis=axis)

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _node(y, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    y = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
            p._accumulate(gp)

    return _node(y, tuple(parts), backward)


def gather_cells(fmap: Tensor, cells: np.ndarray, offsets: np.ndarray | None = None) -> Tensor:
    """Pick feature vectors at integer (row, col) ``cells`` of shape (B, N, 2).

    With ``offsets`` the result is the mean over the shifted windows, with
    indices clamped to the map border.
    """
    n, h, w, c = fmap.shape
    if cells.shape[0] != n or cells.shape[-1] != 2:
        raise ShapeMismatch(f"gather_cells: fmap {fmap.shape}, cells {cells.shape}")
    if offsets is None:
        offsets = np.zeros((1, 2), dtype=np.int64)
    batch = np.arange(n)[:, None]
    index_sets = []
    y = np.zeros((n, cells.shape[1], c), dtype=fmap.dtype)
    for dr, dc in offsets:
        rows = np.clip(cells[..., 0] + dr, 0, h - 1)
        cols = np.clip(cells[..., 1] + dc, 0, w - 1)
        index_sets.append((rows, cols))
        y += fmap.data[batch, rows, cols]
    y /= len(offsets)

    def backward(g):
        dmap = np.zeros(fmap.shape, dtype=g.dtype)
        share = g / len(offsets)
        for rows, cols in index_sets:
            np.add.at(dmap, (np.broadcast_to(batch, rows.shape), rows, cols), share)
        fmap._accumulate(dmap)

    return _node(y, (fmap,), backward)


def pair_affine(feats: Tensor, w: Tensor, b: Tensor, first: np.ndarray, second: np.ndarray,
                incidence: tuple[np.ndarray, np.ndarray], cond: Tensor | None = None) -> Tensor:
    """Affine map of concatenated pair inputs without materialising them.

    Computes ``concat(f_i, f_j[, s]) @ w + b`` for every pair (i, j) given by
    ``first``/``second`` on features (B, N, C), returning (B, P, U). The
    weight rows split into the f_i block, the f_j block and the optional
    conditioning block. ``incidence`` holds the (P, N) one-hot matrices of
    ``first`` and ``second`` used to scatter gradients back to landmarks.
    """
    n, count, c = feats.shape
    s_width = 0 if cond is None else cond.shape[-1]
    if w.shape[0] != 2 * c + s_width or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"pair_affine: feats {feats.shape}, cond width {s_width}, w {w.shape}")
    wa, wb, ws = w.data[:c], w.data[c:2 * c], w.data[2 * c:]
    ua = feats.data @ wa
    ub = feats.data @ wb
    y = ua[:, first] + ub[:, second] + b.data
    if cond is not None:
        y += (cond.data @ ws)[:, None, :]
    inc_a, inc_b = incidence

    def backward(g):
        dua = np.einsum("pn,bpu->bnu", inc_a, g, optimize=True)
        dub = np.einsum("pn,bpu->bnu", inc_b, g, optimize=True)
        flat = feats.data.reshape(-1, c)
        dw = np.empty_like(w.data)
        dw[:c] = flat.T @ dua.reshape(-1, dua.shape[-1])
        dw[c:2 * c] = flat.T @ dub.reshape(-1, dub.shape[-1])
        g_pairs = g.sum(axis=1)
        if cond is not None:
            dw[2 * c:] = cond.data.T @ g_pairs
            cond._accumulate(g_pairs @ ws.T)
        w._accumulate(dw)
        b._accumulate(g_pairs.sum(axis=0))
        feats._accumulate(dua @ wa.T + dub @ wb.T)

    return _node(y, (feats, w, b) + (() if cond is None else (cond,)), backward)


def lstm_sequence(xs: Tensor, w: Tensor, b: Tensor) -> Tensor:
    hs, caches = F.lstm_sequence_forward(xs.data, w.data, b.data)

    def backward(g):
        dxs, dw, db = F.lstm_sequence_backward(g, caches)
        xs._accumulate(dxs)
        w._accumulate(dw)
        b._accumulate(db)

    return _node(hs, (xs, w, b), backward)


def last_step(hs: Tensor) -> Tensor:
    def backward(g):
        d = np.zeros(hs.shape, dtype=g.dtype)
        d[:, -1] = g
        hs._accumulate(d)

    return _node(hs.data[:, -1].copy(), (hs,), backward)


def reverse_steps(xs: Tensor) -> Tensor:
    return _node(xs.data[:, ::-1].copy(), (xs,), lambda g: xs._accumulate(g[:, ::-1].copy()))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    loss, grad = F.softmax_cross_entropy(logits.data, labels)
    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), lambda g: logits._accumulate(g * grad))


def external_loss(inputs: Sequence[Tensor], value: float, grads: Sequence[np.ndarray]) -> Tensor:
    """Scalar node whose gradients were computed outside the tape."""
    def backward(g):
        for t, gt in zip(inputs, grads):
            if gt is not None:
                t._accumulate(g * gt)

    return _node(np.asarray(value, dtype=inputs[0].dtype), tuple(inputs), backward)
