"""Parameter containers, initializers and layer primitives."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Attributes that are Tensors with ``requires_grad`` count as parameters,
    attributes that are Modules (or lists of Modules) are walked recursively,
    and names listed in ``_buffers`` are plain numpy state saved alongside.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            for name, obj in _walk(val, f"{prefix}{key}"):
                if isinstance(obj, Tensor) and obj.requires_grad:
                    yield name, obj
                elif isinstance(obj, Module):
                    yield from obj.named_parameters(prefix=f"{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in vars(self).items():
            for name, obj in _walk(val, f"{prefix}{key}"):
                if isinstance(obj, Module):
                    yield from obj.named_buffers(prefix=f"{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod[int(part)] if isinstance(mod, list) else getattr(mod, part)
        current = getattr(mod, leaf)
        current[...] = value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for val in vars(self).values():
            for _, obj in _walk(val, ""):
                if isinstance(obj, Module):
                    obj.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, name):
    if isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield f"{name}.{i}", item
    else:
        yield name, val


# --------------------------------------------------------------------------
# initializers


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int | None = None) -> np.ndarray:
    """He-uniform: U(-b, b) with b = sqrt(6 / fan_in), fan_in = last dim by default."""
    fan_in = fan_in or shape[-1]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# layers


class BatchNorm(Module):
    """Column-wise batch normalization with running statistics.

    Train mode normalizes with batch statistics and updates the running
    averages; eval mode uses the frozen running statistics.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(features, dtype=np.float32)
        self.running_var = np.ones(features, dtype=np.float32)
        self.gamma = param(np.ones(features)) if affine else None
        self.beta = param(np.zeros(features)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        batch_stats = self.training and x.shape[0] > 1
        out, mu, var = T.batch_norm(x, self.running_mean, self.running_var, self.gamma, self.beta,
                                    self.eps, use_batch_stats=batch_stats)
        if batch_stats:
            n = x.shape[0]
            m = np.float32(self.momentum)
            self.running_mean *= 1 - m
            self.running_mean += (m * mu).astype(np.float32)
            self.running_var *= 1 - m
            self.running_var += (m * var * n / (n - 1)).astype(np.float32)
        return out


class Dice(Module):
    """Data-adaptive activation: p = sigmoid(BN(x)), out = p*x + (1-p)*alpha*x."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-8):
        super().__init__()
        self.norm = BatchNorm(features, momentum=momentum, eps=eps, affine=False)
        self.alpha = param(np.zeros(features))

    def __call__(self, x: Tensor) -> Tensor:
        p = T.sigmoid(self.norm(x))
        gate = T.add(self.alpha, T.mul(p, T.sub(1.0, self.alpha)))
        return T.mul(x, gate)


ACTIVATIONS = ("relu", "dice", "none")


def dense_layer_forward(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "relu",
                        norm: BatchNorm | None = None, dice: Dice | None = None) -> Tensor:
    """y = act(norm(W x + b)) for a batch of row vectors ``x``.

    ``dice`` carries its own batch-norm state and is required for the dice
    activation.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense layer expects width {weight.shape[1]}, got {x.shape[-1]}")
    y = T.linear(x, weight, bias)
    if norm is not None:
        y = norm(y)
    if activation == "relu":
        return T.relu(y)
    if activation == "dice":
        if dice is None:
            raise ValueError("dice activation needs its batch-norm state")
        return dice(y)
    return y


class Dense(Module):
    """Fully connected layer with optional batch norm before the activation."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, activation: str = "relu",
                 batch_norm: bool = False):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = param(kaiming_uniform(rng, (d_out, d_in)))
        self.bias = param(np.zeros(d_out))
        self.activation = activation
        self.norm = BatchNorm(d_out) if batch_norm and activation != "dice" else None
        self.dice = Dice(d_out) if activation == "dice" else None

    def __call__(self, x: Tensor) -> Tensor:
        return dense_layer_forward(x, self.weight, self.bias, self.activation, self.norm, self.dice)


class Embedding(Module):
    """Lookup table whose row 0 is the fixed all-zero padding row."""

    def __init__(self, rng: np.random.Generator, rows: int, dim: int, std: float = 0.05):
        super().__init__()
        table = rng.normal(0.0, std, size=(rows, dim)).astype(np.float32)
        table[0] = 0.0
        self.table = param(table)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.take_rows(self.table, ids, frozen_row=0)

    @property
    def rows(self) -> int:
        return self.table.shape[0]
