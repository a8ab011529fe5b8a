"""Dense-tensor kernel with reverse-mode differentiation.

A ``GradTape`` records every differentiable operation executed while it is
active (per thread); ``backward`` replays the records in exact reverse
execution order, summing each parameter's gradient over all paths.

Shapes are explicit everywhere. The only broadcast-like operations are
``bias_add`` (vector over the last axis) and ``expand_leading`` (tile a
shared parameter across a batch, gradient summed back). Default scalar
type is float32; switch to float64 with ``set_default_dtype`` or the
``precision`` context manager when running gradient checks.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, LabelError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_TLS = threading.local()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported scalar type {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


@contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type ("f32"/"f64" accepted)."""
    names = {"f32": np.float32, "f64": np.float64}
    prev = _DEFAULT_DTYPE
    set_default_dtype(names.get(dtype, dtype))
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """n-d float array, optionally tracked by the active gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class GradTape:
    """Ordered record of executed operations for one thread of execution."""

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.stack.pop()
        return False

    def record(self, fn) -> None:
        self._records.append(fn)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def active_tape() -> GradTape | None:
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(out_data: np.ndarray, inputs, backward) -> Tensor:
    """Wrap a result; register the backward closure when a tape is active."""
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        def step():
            if out.grad is not None:
                backward(out.grad)
        tape.record(step)
    return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product. Backward: dA = g @ B^T, dB = A^T @ g."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _emit(out_data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched 3-d matrix product (n,p,q) @ (n,q,r)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.transpose(0, 2, 1))
        _accumulate(b, a.data.transpose(0, 2, 1) @ g)

    return _emit(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _emit(out_data, (a, b), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis (the one sanctioned broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add needs trailing dim {x.shape[-1]}, got bias {b.shape}")
    out_data = x.data + b.data

    def backward(g):
        _accumulate(x, g)
        _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _emit(out_data, (x, b), backward)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-learnable array (broadcastable against x), e.g. a mask bias."""
    out_data = x.data + np.asarray(c, dtype=x.dtype)

    def backward(g):
        _accumulate(x, g)

    return _emit(out_data, (x,), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data * x.dtype.type(s)

    def backward(g):
        _accumulate(x, g * x.dtype.type(s))

    return _emit(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _emit(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _emit(out_data, (x,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(p, g[tuple(index)])

    return _emit(out_data, parts, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out_data = np.ascontiguousarray(x.data[index])

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            _accumulate(x, full)

    return _emit(out_data, (x,), backward)


def expand_leading(x: Tensor, n: int) -> Tensor:
    """Tile as a new leading axis of size n; gradient sums back over it."""
    out_data = np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.shape))

    def backward(g):
        _accumulate(x, g.sum(axis=0))

    return _emit(out_data, (x,), backward)


def _rows_view(data: np.ndarray, axis: int):
    """Move `axis` last and flatten to 2-d rows; returns array + restore fn."""
    moved = np.moveaxis(data, axis, -1)
    shape = moved.shape
    rows = np.ascontiguousarray(moved.reshape(-1, shape[-1]))

    def restore(arr2d):
        return np.moveaxis(arr2d.reshape(shape), -1, axis)

    return rows, restore


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along `axis` with max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    rows, restore = _rows_view(x.data, axis)
    y_rows = kernels.softmax_rows(rows)
    out_data = np.ascontiguousarray(restore(y_rows))

    def backward(g):
        g_rows, _ = _rows_view(g, axis)
        dx = kernels.softmax_rows_backward(y_rows, np.ascontiguousarray(g_rows))
        _accumulate(x, np.ascontiguousarray(restore(dx)))

    return _emit(out_data, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-token normalization over the last axis, then affine."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match dim {dim}")
    rows = np.ascontiguousarray(x.data.reshape(-1, dim))
    y_rows, mean, rstd = kernels.layernorm_rows(rows, gamma.data, beta.data, eps)
    out_data = y_rows.reshape(x.shape)

    def backward(g):
        g_rows = np.ascontiguousarray(g.reshape(-1, dim))
        dx, dgamma, dbeta = kernels.layernorm_rows_backward(rows, gamma.data, mean, rstd, g_rows)
        _accumulate(x, dx.reshape(x.shape))
        _accumulate(gamma, dgamma.astype(gamma.dtype, copy=False))
        _accumulate(beta, dbeta.astype(beta.dtype, copy=False))

    return _emit(out_data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    x_c = np.ascontiguousarray(x.data)
    out_data = kernels.gelu_forward(x_c)

    def backward(g):
        _accumulate(x, kernels.gelu_backward(x_c, np.ascontiguousarray(g)))

    return _emit(out_data, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Accepts (C,) logits with a scalar label or (B, C) with a length-B label
    vector. Backward is softmax(logits) - one_hot(labels), divided by B.
    """
    squeeze = logits.ndim == 1
    data = logits.data.reshape(1, -1) if squeeze else logits.data
    if data.ndim != 2:
        raise ShapeError(f"cross_entropy needs 1-d or 2-d logits, got {logits.shape}")
    labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = data.shape
    if labels_arr.shape != (n,):
        raise ShapeError(f"labels shape {labels_arr.shape} does not match batch {n}")
    if labels_arr.min() < 0 or labels_arr.max() >= c:
        raise LabelError(f"label out of range [0, {c}): {labels_arr.min()}..{labels_arr.max()}")
    losses, probs = kernels.cross_entropy_forward(np.ascontiguousarray(data), labels_arr)
    out_data = np.asarray(losses.mean(), dtype=data.dtype)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels_arr] -= 1.0
        d *= float(g) / n
        _accumulate(logits, d.reshape(logits.shape))

    return _emit(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` is a nullary callable returning a scalar Tensor computed from
    `params`, which must be float64 tensors with requires_grad set.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.dtype(np.float64):
            raise ConfigError("grad_check requires float64 parameters")
        if not p.requires_grad:
            raise ConfigError("grad_check parameters must require gradients")
        p.zero_grad()

    with GradTape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.ravel()
        a_flat = a.ravel()
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-3)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
