"""Dense tensors with a reverse-mode tape.

A :class:`Tape` records every op whose inputs require gradients while it is
the active tape (``with Tape() as tape: ...``).  ``tape.backward(loss)``
walks the record in exact reverse order and accumulates ``.grad`` on every
tensor that requires it.  Outside a tape nothing is recorded, which is the
inference path.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


_state = threading.local()
_DETERMINISTIC = False


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Only the gradient checker uses this (finite differences need float64);
    model code always runs in float32.
    """
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


def set_deterministic(flag: bool) -> None:
    """Route every matmul through the fixed-order kernel.

    In this mode a row's result never depends on which other rows share the
    batch, so batched and looped execution agree bitwise.
    """
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


@contextlib.contextmanager
def branch_trace():
    """Collect a fingerprint of every piecewise branch taken (ReLU masks, max picks).

    Two evaluations with equal traces lie on the same smooth piece of the
    function, which is what the gradient checker needs to know.
    """
    old = getattr(_state, "branches", None)
    trace: list[int] = []
    _state.branches = trace
    try:
        yield trace
    finally:
        _state.branches = old


def _branch(arr: np.ndarray) -> None:
    trace = getattr(_state, "branches", None)
    if trace is not None:
        trace.append(hash(np.ascontiguousarray(arr).tobytes()))


def is_deterministic() -> bool:
    return _DETERMINISTIC


@contextlib.contextmanager
def deterministic(flag: bool = True):
    old = _DETERMINISTIC
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(old)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D or stacked 3-D matmul honoring deterministic mode."""
    if not _DETERMINISTIC or a.dtype != np.float32 or b.dtype != np.float32:
        # overflow is reported by the non-finite check on the result
        with np.errstate(over="ignore", invalid="ignore"):
            return a @ b
    if a.ndim == 2 and b.ndim == 2:
        return kernels.matmul_ordered(a, b)
    a3 = a if a.ndim == 3 else np.broadcast_to(a, (b.shape[0],) + a.shape)
    b3 = b if b.ndim == 3 else np.broadcast_to(b, (a.shape[0],) + b.shape)
    return np.stack([kernels.matmul_ordered(x, y) for x, y in zip(a3, b3)])


@contextlib.contextmanager
def no_grad():
    """Suspend recording on any active tape (inference inside a training step)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """An n-d float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; all real work happens in the functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of differentiable ops."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        if self._used:
            raise TapeError("cannot record onto a tape after backward()")
        self._nodes.append((out, parents, backward))

    def backward(self, loss: Tensor, grad=None, order_log: list | None = None) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every recorded input.

        ``order_log``, when given, receives the index of each visited node;
        tests use it to confirm the reverse traversal.
        """
        if self._used:
            raise TapeError("backward() already ran on this tape; record a new one")
        if grad is None:
            if loss.data.size != 1:
                raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        self._used = True
        _accumulate(loss, np.asarray(grad, dtype=loss.data.dtype))
        for pos in range(len(self._nodes) - 1, -1, -1):
            out, parents, fn = self._nodes[pos]
            if out.grad is None:
                continue
            if order_log is not None:
                order_log.append(pos)
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is not None and isinstance(parent, Tensor) and parent.requires_grad:
                    _accumulate(parent, g)
        self._nodes.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence, backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    stack = _tape_stack()
    needs = bool(stack) and stack[-1] is not None and any(
        isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        stack[-1].record(out, tuple(parents), backward)
    return out


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=default_dtype())


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    return _make(_data(a) + _data(b), (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    return _make(_data(a) - _data(b), (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(x: Tensor) -> Tensor:
    xd = _data(x)
    mask = xd > 0
    _branch(mask)
    return _make(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = _data(x)
    out = _stable_sigmoid(xd)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(xd: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError instead
        out = np.exp(_data(x))
    return _make(out, (x,), lambda g: (g * out,), "exp")


def square(x: Tensor) -> Tensor:
    xd = _data(x)
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


# --------------------------------------------------------------------------
# reductions and shape ops


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = _data(x)
    out = np.asarray(xd.sum(axis=axis, keepdims=keepdims), dtype=xd.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    n = xd.size if axis is None else np.prod([xd.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max(x: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the lowest index among ties."""
    xd = _data(x)
    idx = np.argmax(xd, axis=axis)
    _branch(idx)
    out = np.take_along_axis(xd, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward, "max")


def reshape(x: Tensor, shape) -> Tensor:
    xd = _data(x)
    return _make(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    xd = _data(x)
    if axes is None:
        axes = tuple(range(xd.ndim - 2)) + (xd.ndim - 1, xd.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(xd, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(parts), backward, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    xd = _data(x)
    out = xd[idx]

    def backward(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def take_rows(table: Tensor, ids: np.ndarray, frozen_row: int | None = None) -> Tensor:
    """Gather rows of a 2-D table by integer ids (embedding lookup).

    ``frozen_row`` never receives gradient (the padding row).
    """
    td = _data(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise IndexError(f"row id out of range [0, {td.shape[0]})")
    out = td[ids]

    def backward(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, td.shape[1])
        if frozen_row is not None:
            keep = flat_ids != frozen_row
            flat_ids, flat_g = flat_ids[keep], flat_g[keep]
        gx = np.zeros_like(td)
        order = np.argsort(flat_ids, kind="stable")
        sorted_ids = flat_ids[order]
        if sorted_ids.size:
            uniq, starts = np.unique(sorted_ids, return_index=True)
            gx[uniq] = np.add.reduceat(flat_g[order], starts, axis=0)
        return (gx,)

    return _make(out, (table,), backward, "take_rows")


def segment_sum(values: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``n_segments`` buckets; ``segment`` must be sorted.

    Empty buckets come out as zero rows.
    """
    vd = _data(values)
    segment = np.asarray(segment, dtype=np.int64)
    if segment.size and np.any(np.diff(segment) < 0):
        raise ValueError("segment ids must be sorted")
    out = np.zeros((n_segments,) + vd.shape[1:], dtype=vd.dtype)
    if segment.size:
        uniq, starts = np.unique(segment, return_index=True)
        out[uniq] = np.add.reduceat(vd, starts, axis=0)
    return _make(out, (values,), lambda g: (g[segment],), "segment_sum")


def scatter_rows(values: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place ``values[i]`` at row ``index[i]`` of a zero matrix (inverse gather)."""
    vd = _data(values)
    out = np.zeros((n_rows,) + vd.shape[1:], dtype=vd.dtype)
    out[index] = vd
    return _make(out, (values,), lambda g: (g[index],), "scatter_rows")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matmul, or stacked 3-D matmul where either side may be 2-D."""
    ad, bd = _data(a), _data(b)
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise ValueError(f"matmul supports 2-D/3-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = _mm(ad, bd)

    def backward(g):
        ga = _mm(g, np.ascontiguousarray(np.swapaxes(bd, -1, -2)))
        gb = _mm(np.ascontiguousarray(np.swapaxes(ad, -1, -2)), g)
        if ad.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if bd.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for 2-D ``x`` and ``weight`` of shape [out, in]."""
    xd, wd = _data(x), _data(weight)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear shape mismatch: x{xd.shape} vs W{wd.shape}")
    out = _mm(xd, np.ascontiguousarray(wd.T))
    if bias is not None:
        bd = _data(bias)
        if bd.shape != (wd.shape[0],):
            raise ValueError(f"bias shape {bd.shape} does not match W{wd.shape}")
        out = out + bd

    def backward(g):
        gx = _mm(g, wd)
        gw = _mm(np.ascontiguousarray(g.T), xd)
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward, "linear")


# --------------------------------------------------------------------------
# normalization and probability


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit norm along the last axis; zero rows stay zero."""
    xd = _data(x)
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = xd / denom
    clipped = norm < eps
    _branch(clipped)

    def backward(g):
        # d(x/n)/dx = (g - y <g, y>) / n  when n > eps; plain g/eps otherwise
        proj = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(clipped, g / denom, (g - out * proj) / denom)
        return (gx.astype(xd.dtype),)

    return _make(out.astype(xd.dtype), (x,), backward, "l2_normalize")


def softmax(logits: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``logits / tau`` with max subtraction."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    xd = _data(logits)
    z = xd / xd.dtype.type(tau)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((out * (g - dot) / xd.dtype.type(tau)).astype(xd.dtype),)

    return _make(out.astype(xd.dtype), (logits,), backward, "softmax")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits), in log-sum-exp form."""
    xd = _data(logits)
    y = np.asarray(labels, dtype=xd.dtype).reshape(xd.shape)
    # -[y log s(x) + (1-y) log(1-s(x))] = max(x,0) - x*y + log(1 + exp(-|x|))
    per = np.maximum(xd, 0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    n = xd.size
    out = np.asarray(per.mean(), dtype=xd.dtype)

    def backward(g):
        return ((g * (_stable_sigmoid(xd) - y) / n).astype(xd.dtype), None)

    return _make(out, (logits, None), backward, "bce_with_logits")


def batch_norm(x: Tensor, mean_: np.ndarray, var_: np.ndarray, gamma: Tensor | None,
               beta: Tensor | None, eps: float, use_batch_stats: bool) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize the columns of a 2-D ``x``.

    In batch-stat mode the statistics come from ``x`` itself and are
    differentiated through; otherwise ``mean_``/``var_`` are constants.
    Returns the output plus the statistics actually used.
    """
    xd = _data(x)
    if use_batch_stats:
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
    else:
        mu, var = mean_.astype(xd.dtype), var_.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu) * inv
    gd = _data(gamma) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + _data(beta)
    n = xd.shape[0]

    def backward(g):
        gg = (g * xhat).sum(axis=0) if gamma is not None else None
        gb = g.sum(axis=0) if beta is not None else None
        gxhat = g * gd if gd is not None else g
        if use_batch_stats:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv
        return gx.astype(xd.dtype), gg, gb

    return _make(out.astype(xd.dtype), (x, gamma, beta), backward, "batch_norm"), mu, var


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
