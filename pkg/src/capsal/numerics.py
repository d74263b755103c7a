"""Dense float64 tensors with reverse-mode autodiff.

Everything downstream (the captioning model, training, saliency probes)
is built on this module. Tensors wrap C-contiguous float64 numpy arrays;
operations record a tape node only while gradients are enabled and some
input requires them, so inference runs tape-free under `no_grad()`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    # note: ascontiguousarray would promote 0-d scalars to 1-d
    arr = np.asarray(data, dtype=np.float64, order="C")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A float64 value carrier, optionally a node in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tensor_sum(self)

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates into .grad."""
        if self.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    stack.append((parent, False))

        self.grad = np.ones(())
        for node in reversed(topo):
            ctx = node._ctx
            if ctx is None or node.grad is None:
                continue
            for parent, pgrad in zip(ctx.parents, ctx.backward(node.grad)):
                if pgrad is None:
                    continue
                if not (parent.requires_grad or parent._ctx is not None):
                    continue
                if parent.grad is None:
                    parent.grad = pgrad
                else:
                    parent.grad = parent.grad + pgrad


class _Node:
    """Tape record: parent tensors plus the vjp closure of one op."""

    __slots__ = ("parents", "backward")

    def __init__(self, parents: Sequence[Tensor], backward: Callable):
        self.parents = parents
        self.backward = backward


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._ctx is not None for p in parents):
        out._ctx = _Node(parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce grad back to `shape` after numpy broadcasting in forward."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; inner dimensions must agree."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise DimensionError(
            f"matmul needs array operands, got {a.data.shape} @ {b.data.shape}"
        )
    inner_b = b.data.shape[-2] if b.data.ndim >= 2 else b.data.shape[0]
    if a.data.shape[-1] != inner_b:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            # (..., k) @ (k,) -> (...,)
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)),) * 2) \
                if g.ndim else g * a.data
            return ga, gb
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        if a.data.ndim > 2:
            # (..., m, k) @ (k, n): contract every leading axis of the grad
            lead = tuple(range(a.data.ndim - 1))
            return g @ b.data.T, np.tensordot(a.data, g, axes=(lead, lead))
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def tensor_sum(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, parts, backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2-d tensor (embedding lookup)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (a,), backward)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(data), (a,), backward)


def softmax(logits) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max-subtraction."""
    t = _wrap(logits)
    if t.data.size == 0:
        raise DimensionError("softmax of empty input")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (t,), backward)


# ---------------------------------------------------------------------
# probability helpers (plain ndarray in, float out; not differentiated)
# ---------------------------------------------------------------------

def kl_divergence(p, q) -> float:
    """D_KL(p || q) = sum_k p_k ln(p_k / q_k), with 0*ln(0/q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any(q <= 0.0):
        raise ContractError("q must be strictly positive")
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def softmax_values(logits) -> np.ndarray:
    """Plain-array softmax sharing the stabilized formula above."""
    with no_grad():
        return softmax(np.asarray(logits, dtype=np.float64)).data


# ---------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------

def finite_difference_grad(f: Callable[[], float], param: Tensor,
                           step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. every param entry."""
    base = param.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check(loss_fn: Callable[[], Tensor],
                   params: dict[str, Tensor],
                   step: float = 1e-5,
                   floor: float = 1e-5) -> dict[str, float]:
    """Per-tensor norm-relative error between backward() and central differences.

    Returns {name: ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, floor)}.
    Central differences on an O(1) loss carry ~1e-10 roundoff per entry, so
    gradient norms below `floor` cannot be distinguished from zero; the floor
    keeps such tensors from reporting spurious relative errors.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    def scalar_loss() -> float:
        with no_grad():
            return loss_fn().item()

    errors = {}
    for name, p in params.items():
        fd = finite_difference_grad(scalar_loss, p, step)
        num = float(np.linalg.norm(analytic[name] - fd))
        den = max(float(np.linalg.norm(analytic[name])),
                  float(np.linalg.norm(fd)), floor)
        errors[name] = num / den
    return errors


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))
