"""Parameters, a minimal module container and the layers the models are built from."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from ..errors import ShapeMismatch
from . import functional as F
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name
        self.frozen = False

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Attribute-scanning container: Parameters, sub-Modules and lists of Modules.

    Buffers (non-trainable state such as running statistics) are ndarray
    attributes named in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def name_parameters(self, prefix: str = "") -> None:
        """Stamp dotted attribute paths onto every parameter's ``name``."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
            p.requires_grad = False
            p.grad = None
        return self.eval()

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = False
            p.requires_grad = True
        return self.train()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True):
        params = dict(self.named_parameters(prefix))
        missing = []
        for name, p in params.items():
            if name not in state:
                missing.append(name)
                continue
            if state[name].shape != p.data.shape:
                raise ShapeMismatch(f"{name}: checkpoint {state[name].shape} vs model {p.data.shape}")
            p.data = np.array(state[name])
        for m_prefix, m in self._named_modules(prefix):
            for key in m._buffers:
                name = f"{m_prefix}{key}"
                if name in state:
                    setattr(m, key, np.array(state[name]))
                else:
                    missing.append(name)
        if strict and missing:
            raise KeyError(f"missing entries: {missing}")
        return missing

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val._named_modules(f"{prefix}{key}.")

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key in m._buffers:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.w = Parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, width: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        gamma, beta = self.gamma, self.beta
        y, cache, self.running_mean, self.running_var = F.batch_norm_forward(
            x.data, gamma.data, beta.data, self.training,
            self.running_mean, self.running_var, self.momentum, self.eps)

        def backward(g):
            dx, dgamma, dbeta = F.batch_norm_backward(g, cache)
            x._accumulate(dx)
            gamma._accumulate(dgamma)
            beta._accumulate(dbeta)

        return T._node(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator):
        super().__init__()
        fan_in, fan_out = kernel * kernel * c_in, kernel * kernel * c_out
        self.w = Parameter(glorot_uniform(rng, (kernel, kernel, c_in, c_out), fan_in, fan_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.stride, "same")


class DenseBlock(Module):
    """Affine -> batch norm -> ReLU."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(n_in, n_out, rng)
        self.bn = BatchNorm(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.linear(x)))


class MLP(Module):
    def __init__(self, n_in: int, widths, rng: np.random.Generator):
        super().__init__()
        if not widths or min(widths) < 1:
            raise ValueError("MLP widths must be a nonempty list of positive ints")
        dims = [n_in, *widths]
        self.layers = [DenseBlock(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def out_width(self) -> int:
        return self.layers[-1].linear.w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LSTMLayer(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        super().__init__()
        limit = 1.0 / np.sqrt(hidden)
        self.w = Parameter(rng.uniform(-limit, limit, size=(n_in + hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        self.b = Parameter(b)

    @property
    def hidden(self) -> int:
        return self.w.shape[1] // 4

    def __call__(self, xs: Tensor) -> Tensor:
        return T.lstm_sequence(xs, self.w, self.b)


class LSTM(Module):
    """Stacked LSTM returning the final hidden state of the top layer."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, num_layers: int = 1):
        super().__init__()
        dims = [n_in] + [hidden] * num_layers
        self.layers = [LSTMLayer(a, hidden, rng) for a in dims[:-1]]

    def __call__(self, xs: Tensor) -> Tensor:
        for layer in self.layers:
            xs = layer(xs)
        return T.last_step(xs)
