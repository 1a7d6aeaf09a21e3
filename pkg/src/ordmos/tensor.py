"""Dense float64 tensors with tape-based reverse-mode gradients.

Every differentiable layer in the model is composed from the primitives in
this module. Forward results are plain numpy computations and therefore
bit-deterministic; gradients are produced by replaying a GradTape in exact
reverse execution order, accumulating each tensor's gradient across all of
its uses.

Tensors are immutable once created and safe to share across threads. A
GradTape is confined to a single thread: enter it as a context manager,
run the forward pass inside, then call ``gradients``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DetachedParameterError",
    "NonFiniteError",
    "set_debug_checks",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "abs_",
    "softplus",
    "softmax",
    "logsumexp",
    "layernorm",
    "transpose",
    "reshape",
    "slice_",
    "concat",
    "mean",
    "stop_gradient",
    "dropout",
]

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf validation pass over op outputs (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class NonFiniteError(ValueError):
    """An operation produced NaN or Inf while debug checks were enabled."""


class DetachedParameterError(ValueError):
    """A requested parameter never appeared on the tape."""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"parameters not on tape: {', '.join(self.names)}")


class Tensor:
    """Immutable dense array of 64-bit floats (0-, 1- or 2-dimensional)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


GradFn = Callable[[np.ndarray], np.ndarray]

_ACTIVE_TAPE: "GradTape | None" = None


class GradTape:
    """Ordered record of executed primitives for one forward pass.

    Replaying the entries in reverse visits operations in exact reverse
    execution order; each tensor's gradient is summed over all of its uses
    before its producing entry is reached.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[tuple[Tensor, GradFn], ...]]] = []

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[tuple[Tensor, GradFn], ...]) -> None:
        self._entries.append((out, inputs))

    def gradients(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of a scalar loss for every named parameter.

        Parameters that are on the tape but do not influence the loss get
        zero gradients; parameters that never appeared on the tape at all
        are reported by name.
        """
        if loss.data.ndim != 0:
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")

        on_tape: set[int] = set()
        for _, inputs in self._entries:
            for tin, _ in inputs:
                on_tape.add(id(tin))
        detached = [name for name, p in params.items() if id(p) not in on_tape]
        if detached:
            raise DetachedParameterError(detached)

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs in reversed(self._entries):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            for tin, gradfn in inputs:
                contrib = gradfn(gout)
                tid = id(tin)
                acc = grads.get(tid)
                grads[tid] = contrib if acc is None else acc + contrib

        result = {}
        for name, p in params.items():
            g = grads.get(id(p))
            result[name] = np.zeros_like(p.data) if g is None else np.asarray(g)
        return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data: np.ndarray, inputs: tuple[tuple[Tensor, GradFn], ...]) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("non-finite value in op output")
    out = Tensor(out_data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, inputs)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data + b.data,
        (
            (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.data.shape: _unbroadcast(g, sb)),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data - b.data,
        (
            (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.data.shape: _unbroadcast(-g, sb)),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, ((a, lambda g: -g),))


def matmul(a, b) -> Tensor:
    """Matrix product; operands may each be 1- or 2-dimensional."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul operands must be 1- or 2-dimensional")
    if ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    out = ad @ bd

    if ad.ndim == 2 and bd.ndim == 2:
        ga = lambda g: g @ bd.T
        gb = lambda g: ad.T @ g
    elif ad.ndim == 1 and bd.ndim == 2:
        ga = lambda g: bd @ g
        gb = lambda g: np.outer(ad, g)
    elif ad.ndim == 2 and bd.ndim == 1:
        ga = lambda g: np.outer(g, bd)
        gb = lambda g: ad.T @ g
    else:  # 1-D dot product -> scalar
        ga = lambda g: g * bd
        gb = lambda g: g * ad
    return _emit(out, ((a, ga), (b, gb)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum rather than a masked select so non-finite inputs stay visible
    return _emit(np.maximum(a.data, 0.0), ((a, lambda g: g * mask),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _emit(y, ((a, lambda g: g * y * (1.0 - y)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, ((a, lambda g: g * (1.0 - y * y)),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _emit(np.abs(a.data), ((a, lambda g: g * s),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _emit(y, ((a, lambda g: g * sig),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def ga(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _emit(y, ((a, ga),))


def logsumexp(a) -> Tensor:
    """log(sum(exp(x))) over all elements, as a scalar."""
    a = as_tensor(a)
    m = a.data.max()
    e = np.exp(a.data - m)
    z = e.sum()
    out = m + math.log(z)
    soft = e / z
    return _emit(np.asarray(out), ((a, lambda g: g * soft),))


def layernorm(a, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def ga(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (g - gm - y * gy) * inv

    return _emit(y, ((a, ga),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _emit(a.data.T, ((a, lambda g: g.T),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _emit(a.data.reshape(shape), ((a, lambda g: g.reshape(orig)),))


def slice_(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def ga(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return full

    return _emit(a.data[idx], ((a, ga),))


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    inputs = []
    offset = 0
    for p in parts:
        n = p.data.shape[axis]

        def ga(g, lo=offset, hi=offset + n):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        inputs.append((p, ga))
        offset += n
    return _emit(out, tuple(inputs))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
        shape = a.data.shape
        return _emit(np.asarray(a.data.mean()), ((a, lambda g: np.full(shape, g / n)),))
    n = a.data.shape[axis]

    def ga(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis) / n

    return _emit(a.data.mean(axis=axis), ((a, ga),))


def stop_gradient(a) -> Tensor:
    """Identity forward; blocks all gradient flow (never recorded)."""
    a = as_tensor(a)
    return Tensor(a.data)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep) / keep
    return _emit(a.data * mask, ((a, lambda g: g * mask),))
