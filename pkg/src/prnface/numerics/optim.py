"""Plain stochastic gradient descent."""
from __future__ import annotations

from typing import Iterable

from .layers import Parameter


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """In place: value <- value - lr * grad for every non-frozen parameter with a gradient."""
    for p in params:
        if p.frozen or p.grad is None:
            continue
        p.data = p.data - learning_rate * p.grad.astype(p.data.dtype, copy=False)
