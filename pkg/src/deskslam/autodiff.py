"""Reverse-mode automatic differentiation over dense tensors.

Define-by-run: while a Tape is active, every primitive records its inputs,
output, and a backward rule; backward() replays the records in reverse and
accumulates gradients into every tensor that requires them. Training runs
in float32; gradient-check oracles build float64 tensors and get float64
arithmetic throughout.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

_active_tape: Optional["Tape"] = None


class Tensor:
    """Dense value with optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of primitive applications; inputs precede their ops."""

    def __init__(self):
        self._entries: List[Tuple[Tensor, Tuple[Tensor, ...], Callable]] = []
        self._tracked: set = set()

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def needs(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, inputs: Tuple[Tensor, ...], output: Tensor, backward: Callable):
        self._tracked.add(id(output))
        self._entries.append((output, inputs, backward))

    def __len__(self):
        return len(self._entries)


def _record(inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape
    if tape is not None and any(tape.needs(t) for t in inputs):
        tape.record(inputs, out, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every recorded tensor reachable from the scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, rule in reversed(tape._entries):
        if out.grad is None:
            continue
        grads = rule(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not tape.needs(t):
                continue
            if t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=True)
            else:
                t.grad = t.grad + g.astype(t.data.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_matmul(a: Tensor, b: Tensor):
    if a.data.ndim < 1 or b.data.ndim < 1 or a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record((a, b), out, lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _record((a, b), out, lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record(
        (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _record(
        (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _record((a,), -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_matmul(a, b)
    out = a.data @ b.data
    def rule(g):
        if b.data.ndim > 1:
            ga = g @ np.swapaxes(b.data, -1, -2)
        else:
            ga = np.outer(g, b.data) if a.data.ndim > 1 else g * b.data
        if a.data.ndim > 1:
            gb = np.swapaxes(a.data, -1, -2) @ g
        else:
            gb = np.outer(a.data, g) if b.data.ndim > 1 else g * a.data
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
    return _record((a, b), out, rule)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _record((a,), out, lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record((a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record((a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record((a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record((a,), out, lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _record((a,), a.data * a.data, lambda g: (g * 2.0 * a.data,))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), stable form
    out = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    return _record((a,), out, lambda g: (g / (1.0 + np.exp(-a.data)),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def rule(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)
    return _record((a,), out, rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out.size
    def rule(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy() / scale,)
    return _record((a,), out, rule)


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first maximal element."""
    out = a.data.max(axis=axis)
    arg = a.data.argmax(axis=axis)
    def rule(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)
    return _record((a,), out, rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def rule(g):
        return tuple(np.split(g, splits, axis=axis))
    return _record(tuple(parts), out, rule)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)
    def rule(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(ga, idx, g)
        else:
            ga_m = np.moveaxis(ga, axis, 0)
            np.add.at(ga_m, idx, np.moveaxis(g, axis, 0))
        return (ga,)
    return _record((a,), out, rule)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _record((a,), out, lambda g: (g.reshape(a.data.shape),))


def slice_axis(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]
    def rule(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)
    return _record((a,), out, rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    def rule(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)
    return _record((a,), out, rule)
