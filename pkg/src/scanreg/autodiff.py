"""Minimal N-dimensional tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous float64 numpy arrays. Operations executed while a
``Tape`` is active record a backward rule; ``backward(tape, loss)`` replays the
records in reverse, accumulating gradients additively into ``Tensor.grad``.
A tape covers a single forward pass and is discarded after backward.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_node_ids = itertools.count()

_active_tape: "Tape | None" = None


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; constants go through the scale/shift ops.
    def __add__(self, other):
        return add_const(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return add_const(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of one forward pass, replayed in reverse by ``backward``.

    Records are appended in execution order, so inputs always precede the
    operations that consume them; the reverse sweep therefore visits each
    node exactly once with its output gradient fully accumulated.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[tuple[Tensor, Callable], ...]]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _append(self, out: Tensor, inputs: tuple[tuple[Tensor, Callable], ...]) -> None:
        self._records.append((out, inputs))
        self._output_ids.add(out.node_id)

    def __len__(self) -> int:
        return len(self._records)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node_id not in tape._output_ids:
        raise ContractError("loss is not an output of this tape")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for out, inputs in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        for tensor, grad_fn in inputs:
            contrib = grad_fn(g)
            if tensor.grad is None:
                tensor.grad = contrib
            else:
                tensor.grad = tensor.grad + contrib


def _finish(out_data: np.ndarray, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Wrap an op result, recording backward rules for tracked inputs."""
    tracked = tuple((t, fn) for t, fn in pairs if t.requires_grad)
    out = Tensor(out_data, requires_grad=bool(tracked))
    if tracked and _active_tape is not None:
        _active_tape._append(out, tracked)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _finish(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _finish(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _finish(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    inv = 1.0 / b.data
    return _finish(a.data * inv, [
        (a, lambda g: _unbroadcast(g * inv, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data * inv * inv, b.data.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, [(a, lambda g: -g)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish(out, [(a, lambda g: g * out)])


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _finish(s, [(a, lambda g: g * s * (1.0 - s))])


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _finish(a.data * s, [(a, lambda g: g * s * (1.0 + a.data * (1.0 - s)))])


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _finish(out, [(a, lambda g: g * _sigmoid(a.data))])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish(a.data * c, [(a, lambda g: g * c)])


def add_const(a: Tensor, c: float) -> Tensor:
    return _finish(a.data + float(c), [(a, lambda g: g)])


def clamp_min(a: Tensor, c: float) -> Tensor:
    """Lower clamp; subgradient is zero where the clamp is active."""
    mask = a.data >= c
    return _finish(np.maximum(a.data, c), [(a, lambda g: g * mask)])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_UNARY = {"neg": neg, "exp": exp, "silu": silu, "softplus": softplus, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind; binary kinds broadcast by the trailing-dimension rule."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        return _BINARY[op_kind](a, as_tensor(b))
    if op_kind == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise kind {op_kind!r}")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}")
    src = a.data.shape
    return _finish(a.data.reshape(shape), [(a, lambda g: g.reshape(src))])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.ascontiguousarray(a.data.transpose(axes)),
                   [(a, lambda g: np.ascontiguousarray(g.transpose(inv)))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    offsets = np.cumsum([0] + [d.shape[axis] for d in datas])

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]
        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return fn

    return _finish(out, [(t, make_fn(i)) for i, t in enumerate(tensors)])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward pads with zeros."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) exceeds axis {axis} "
                         f"of shape {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    src = a.data.shape

    def fn(g):
        full = np.zeros(src)
        full[idx] = g
        return full

    return _finish(np.ascontiguousarray(a.data[idx]), [(a, fn)])


def permute_axis(a: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder one axis by a bijective index array; backward gathers by the inverse."""
    if perm.shape != (a.data.shape[axis],):
        raise ShapeError(f"permutation length {perm.shape} does not match axis {axis} "
                         f"of shape {a.data.shape}")
    inv = np.argsort(perm)
    return _finish(np.ascontiguousarray(np.take(a.data, perm, axis=axis)),
                   [(a, lambda g: np.ascontiguousarray(np.take(g, inv, axis=axis)))])


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.data.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, src).copy()

    return _finish(a.data.sum(axis=axis, keepdims=keepdims), [(a, fn)])


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(a.data.shape[ax] for ax in axes)
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Linear and normalization layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b) over the last axis of x."""
    c_in, c_out = w.data.shape
    if x.data.shape[-1] != c_in:
        raise ShapeError(f"linear: inner dims {x.data.shape[-1]} vs {c_in}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, c_in)
    out = x2 @ w.data
    if b is not None:
        if b.data.shape != (c_out,):
            raise ShapeError(f"linear: bias shape {b.data.shape}, expected ({c_out},)")
        out += b.data
    pairs = [
        (x, lambda g: (g.reshape(-1, c_out) @ w.data.T).reshape(x.data.shape)),
        (w, lambda g: x2.T @ g.reshape(-1, c_out)),
    ]
    if b is not None:
        pairs.append((b, lambda g: g.reshape(-1, c_out).sum(axis=0)))
    return _finish(out.reshape(*lead, c_out), pairs)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm: parameter shapes {gamma.data.shape}/{beta.data.shape} "
                         f"do not match channel count {c}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def dx(g):
        gg = g * gamma.data
        term = gg - gg.mean(axis=-1, keepdims=True) - xhat * np.mean(gg * xhat, axis=-1, keepdims=True)
        return term * inv_std

    return _finish(xhat * gamma.data + beta.data, [
        (x, dx),
        (gamma, lambda g: (g * xhat).reshape(-1, c).sum(axis=0)),
        (beta, lambda g: g.reshape(-1, c).sum(axis=0)),
    ])


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must rebuild its forward pass on every call from the current values
    of ``params``. Relative error is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: objective is not finite")
    backward(tape, loss)
    g_ad = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, g_ad):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericsError("grad_check: objective is not finite")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1e-8, abs(gflat[i]) + abs(g_fd))
            worst = max(worst, abs(gflat[i] - g_fd) / denom)
    return worst
