"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import NonFiniteValue


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Iterable[tuple] | None = None) -> dict[tuple, float]:
    """Perturb ``x`` in place coordinate by coordinate; ``f`` re-reads ``x``."""
    if indices is None:
        indices = np.ndindex(*x.shape)
    out = {}
    for idx in indices:
        idx = tuple(int(i) for i in idx)
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteValue(f"objective not finite at coordinate {idx}")
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def sample_indices(shape, count: int | None, rng: np.random.Generator | None = None) -> list[tuple]:
    """All coordinates of ``shape``, or ``count`` of them drawn without replacement."""
    total = int(np.prod(shape))
    if count is None or count >= total:
        return [tuple(i) for i in np.ndindex(*shape)]
    rng = rng or np.random.default_rng(0)
    flat = rng.choice(total, size=count, replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in np.sort(flat)]


def grad_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
               h: float = 1e-5, count: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` at ``x``.

    ``count`` limits the check to a random subset of coordinates.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != x shape {x.shape}")
    numeric = numerical_gradient(lambda: float(f(x)), x, h, sample_indices(x.shape, count, rng))
    worst = 0.0
    for idx, n in numeric.items():
        worst = max(worst, relative_error(float(analytic[idx]), n))
    return worst


def check_parameters(loss_fn: Callable[[], float], params, h: float = 1e-5,
                     count: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Finite-difference check for tensors whose ``.grad`` is already populated.

    ``params`` is an iterable of (name, tensor) pairs; the tensor data is
    perturbed in place and ``loss_fn`` must run a fresh forward pass.
    """
    report = {}
    for name, p in params:
        analytic = np.asarray(p.grad, dtype=np.float64)
        numeric = numerical_gradient(lambda: float(loss_fn()), p.data, h,
                                     sample_indices(p.data.shape, count, rng))
        report[name] = max((relative_error(float(analytic[i]), v) for i, v in numeric.items()), default=0.0)
    return report


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_tape(loss_fn: Callable, tensors, h: float = 1e-5, count: int | None = None,
               rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients with central differences, skipping coordinates at kinks.

    ``loss_fn()`` must run a fresh forward pass and return a scalar Tensor;
    it may add its own branches with ``record_branch``. ``tensors`` is an
    iterable of (name, Tensor) pairs with ``requires_grad`` set. A
    coordinate is used only if the ReLU masks, max-pool choices and any
    other recorded branches are identical at x - h, x and x + h. Returns the
    max relative error per tensor over up to ``count`` usable coordinates.
    """
    from .tensor import trace_branches

    rng = rng or np.random.default_rng(0)
    tensors = list(tensors)
    for _, t in tensors:
        t.grad = None
    with trace_branches() as base:
        loss = loss_fn()
    loss.backward()
    analytic = {name: np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for name, t in tensors}

    def evaluate():
        with trace_branches() as log:
            value = float(loss_fn().data)
        return value, log

    report = {}
    for name, t in tensors:
        x = t.data
        want = x.size if count is None else min(count, x.size)
        used, worst = 0, 0.0
        for flat in rng.permutation(x.size):
            if used >= want:
                break
            idx = np.unravel_index(flat, x.shape)
            orig = x[idx]
            x[idx] = orig + h
            fp, lp = evaluate()
            x[idx] = orig - h
            fm, lm = evaluate()
            x[idx] = orig
            if not _same_branches(lp, base) or not _same_branches(lm, base):
                continue
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteValue(f"objective not finite at {name}{idx}")
            worst = max(worst, relative_error(float(analytic[name][idx]), (fp - fm) / (2.0 * h)))
            used += 1
        if used == 0:
            raise ValueError(f"no kink-free coordinate found for {name}")
        report[name] = worst
    return report
