"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is define-by-run: every operation on :class:`Value` records its
inputs and a backward closure, and :func:`backward` replays the resulting DAG
in reverse topological order. Graphs are rebuilt from scratch on every
training step.

Precision is a process-global mode: float64 for gradient checking, float32
for training. Switch it with :func:`set_default_dtype` before building a
graph; arrays handed to :class:`Value` are cast to the active dtype.
"""

from __future__ import annotations

import dataclasses

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True


class GraphError(ValueError):
    """Raised for malformed graphs: cyclic structure or a non-scalar root."""


def set_default_dtype(dtype) -> None:
    """Set the global array precision ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that disables graph recording inside its scope."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _asarray(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != _DEFAULT_DTYPE:
        arr = arr.astype(_DEFAULT_DTYPE)
    return arr


class Value:
    """An n-dimensional array node in the computation graph.

    Attributes:
        data: the forward array.
        grad: accumulated dL/dself, same shape as data; None until backward
            reaches this node.
        requires_grad: whether backward should deposit a gradient here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Value":
        """Build an op result node. `backward(g)` must route g to each parent.

        Used by fused kernels (e.g. grid interpolation) that implement their
        own vector-Jacobian product instead of composing primitives.
        """
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Value.__new__(Value)
        out.data = data
        out.grad = None
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing -------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias a child's buffer or a broadcast view
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        """Like _accumulate, but takes ownership: g must be a freshly
        allocated array of exactly this node's shape."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Value":
        return Value(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(ensure_value(other)))

    def __rsub__(self, other):
        return add(ensure_value(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(ensure_value(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def ensure_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def backward(root: Value) -> None:
    """Populate `grad` on every requires_grad ancestor of a scalar root.

    The DAG is traversed once in reverse topological order. A non-scalar
    root or a cyclic graph is rejected with :class:`GraphError`.
    """
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior node: free its buffer once routed to parents
                node.grad = None


def _toposort(root: Value) -> list:
    """Iterative post-order over the ancestor DAG, with cycle detection."""
    order: list[Value] = []
    state: dict[int, int] = {}  # id -> 1 in progress, 2 done
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 2
            order.append(node)
            continue
        st = state.get(nid, 0)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in computation graph")
        state[nid] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p), 0)
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps == 0:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Value:
    a, b = ensure_value(a), ensure_value(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.shape))

    return Value._from_op(out_data, (a, b), bwd)


def neg(a) -> Value:
    a = ensure_value(a)
    return Value._from_op(-a.data, (a,), lambda g: a._accumulate_owned(-g))


def mul(a, b) -> Value:
    a, b = ensure_value(a), ensure_value(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            ga = g * b.data
            a._accumulate_owned(ga) if ga.shape == a.shape else a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = g * a.data
            b._accumulate_owned(gb) if gb.shape == b.shape else b._accumulate(_unbroadcast(gb, b.shape))

    return Value._from_op(out_data, (a, b), bwd)


def div(a, b) -> Value:
    a, b = ensure_value(a), ensure_value(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            ga = g / b.data
            a._accumulate_owned(ga) if ga.shape == a.shape else a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = -g * out_data / b.data
            b._accumulate_owned(gb) if gb.shape == b.shape else b._accumulate(_unbroadcast(gb, b.shape))

    return Value._from_op(out_data, (a, b), bwd)


def power(a, exponent: float) -> Value:
    a = ensure_value(a)
    exponent = float(exponent)
    out_data = a.data**exponent

    def bwd(g):
        a._accumulate_owned(g * exponent * a.data ** (exponent - 1.0))

    return Value._from_op(out_data, (a,), bwd)


def exp(a) -> Value:
    a = ensure_value(a)
    out_data = np.exp(a.data)
    return Value._from_op(out_data, (a,), lambda g: a._accumulate_owned(g * out_data))


def log(a) -> Value:
    a = ensure_value(a)
    return Value._from_op(np.log(a.data), (a,), lambda g: a._accumulate_owned(g / a.data))


def sqrt(a) -> Value:
    a = ensure_value(a)
    out_data = np.sqrt(a.data)
    return Value._from_op(out_data, (a,), lambda g: a._accumulate_owned(g * 0.5 / out_data))


def sin(a) -> Value:
    a = ensure_value(a)
    return Value._from_op(np.sin(a.data), (a,), lambda g: a._accumulate_owned(g * np.cos(a.data)))


def cos(a) -> Value:
    a = ensure_value(a)
    return Value._from_op(np.cos(a.data), (a,), lambda g: a._accumulate_owned(-g * np.sin(a.data)))


def relu(a) -> Value:
    a = ensure_value(a)
    mask = a.data > 0
    return Value._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: a._accumulate_owned(g * mask))


def sigmoid(a) -> Value:
    a = ensure_value(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return Value._from_op(out_data, (a,), lambda g: a._accumulate_owned(g * out_data * (1.0 - out_data)))


def softplus(a) -> Value:
    """log(1 + exp(x)), computed stably for large |x|."""
    a = ensure_value(a)
    out_data = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return Value._from_op(out_data, (a,), lambda g: a._accumulate_owned(g * sig))


def clip(a, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    a = ensure_value(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Value._from_op(np.clip(a.data, lo, hi), (a,), lambda g: a._accumulate_owned(g * mask))


def matmul(a, b) -> Value:
    a, b = ensure_value(a), ensure_value(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate_owned(g @ b.data.T)
        if b.requires_grad or b._parents:
            b._accumulate_owned(a.data.T @ g)

    return Value._from_op(out_data, (a, b), bwd)


def transpose2d(a) -> Value:
    a = ensure_value(a)
    return Value._from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: a._accumulate_owned(np.ascontiguousarray(g.T)))


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = ensure_value(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return Value._from_op(np.asarray(out_data), (a,), bwd)


def vmean(a, axis=None, keepdims: bool = False) -> Value:
    a = ensure_value(a)
    n = a.size if axis is None else a.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum_exclusive(a, axis: int = -1) -> Value:
    """Exclusive cumulative sum: out[..., i] = sum of a[..., :i]."""
    a = ensure_value(a)
    inc = np.cumsum(a.data, axis=axis)
    out_data = inc - a.data

    def bwd(g):
        suffix = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        a._accumulate_owned(suffix - g)

    return Value._from_op(out_data, (a,), bwd)


def concat(values, axis: int = -1) -> Value:
    values = [ensure_value(v) for v in values]
    out_data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for v, piece in zip(values, np.split(g, splits, axis=axis)):
            if v.requires_grad or v._parents:
                v._accumulate(piece)

    return Value._from_op(out_data, tuple(values), bwd)


def reshape(a, shape) -> Value:
    a = ensure_value(a)
    orig = a.shape
    return Value._from_op(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(orig)))


def getitem(a, key) -> Value:
    """Basic and integer-array indexing. Backward scatter-adds into place."""
    a = ensure_value(a)
    out_data = a.data[key]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)
    fancy = any(
        isinstance(k, np.ndarray) or isinstance(k, (list, tuple))
        for k in (key if isinstance(key, tuple) else (key,))
    )

    def bwd(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, key, g)  # duplicates must accumulate
        else:
            full[key] += g
        a._accumulate(full)

    return Value._from_op(out_data, (a,), bwd)


def take_rows(a, idx: np.ndarray) -> Value:
    """Select rows along axis 0 by integer index (duplicates allowed)."""
    a = ensure_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        if a.ndim == 1:
            full += np.bincount(idx, weights=g, minlength=a.shape[0]).astype(a.dtype)
        else:
            flat = full.reshape(a.shape[0], -1)
            gflat = g.reshape(g.shape[0], -1)
            for c in range(flat.shape[1]):
                flat[:, c] += np.bincount(idx, weights=gflat[:, c], minlength=a.shape[0]).astype(a.dtype)
        a._accumulate(full)

    return Value._from_op(out_data, (a,), bwd)


def softmax(a, axis: int = -1) -> Value:
    """Numerically stable softmax, composed from primitives."""
    a = ensure_value(a)
    shifted = a - Value(np.max(a.data, axis=axis, keepdims=True))
    e = exp(shifted)
    return e / vsum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    """Per-parameter Adam accumulator; `step` counts completed updates."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_param(cls, param: Value, lr: float, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data),
                   beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(param: Value, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    The gradient is read but not cleared; callers zero it after stepping
    all parameter groups.
    """
    grad = param.grad
    if grad is None:
        grad = np.zeros_like(param.data)
    if grad.shape != param.data.shape or state.m.shape != param.data.shape:
        raise ValueError(
            f"adam_step shape mismatch: param {param.data.shape}, "
            f"grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
