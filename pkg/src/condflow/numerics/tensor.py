"""Dense tensors with recorded-operation reverse-mode gradients.

Every operation that participates in training records its inputs and a
per-input gradient callback; ``Tensor.backward()`` walks the recorded graph
in reverse topological order and accumulates gradients into the leaves.
float32 is the default element type; float64 is used by the verification
suites. Non-finite results raise ``NumericError`` instead of propagating.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from condflow.errors import DimensionError, NumericError

_FLOAT_TYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the non-finite guard; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    return prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray):
        # explicit float64 arrays are respected (verification mode)
        if data.dtype in _FLOAT_TYPES:
            return data
        return data.astype(np.float32)
    return np.asarray(data, dtype=np.float32)


def _check_finite(arr: np.ndarray, what: str):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """N-dimensional numeric value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- reverse pass -----------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires one.

        The receiver must be a scalar (size 1): gradients are of a loss.
        """
        if self.size != 1:
            raise DimensionError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None or not node._parents:
                continue
            g = node.grad
            for parent, fn in zip(node._parents, node._grad_fns):
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib.astype(parent.data.dtype, copy=False)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    # -- method forms used throughout the flow code ------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def arctan(self):
        return arctan(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """Trainable tensor: a value plus a same-shaped gradient and a name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.data.dtype.name})"


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._grad_fns = ()
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fns = tuple(grad_fns)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data + b.data
    return _result(data, "add", (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(g, b.data.shape),
    ))


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data - b.data
    return _result(data, "sub", (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(-g, b.data.shape),
    ))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data * b.data
    return _result(data, "mul", (a, b), (
        lambda g: _unbroadcast(g * b.data, a.data.shape),
        lambda g: _unbroadcast(g * a.data, b.data.shape),
    ))


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _result(data, "div", (a, b), (
        lambda g: _unbroadcast(g / b.data, a.data.shape),
        lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
    ))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    c = float(exponent)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data = a.data ** c
    return _result(data, "power", (a,), (
        lambda g: g * c * a.data ** (c - 1.0),
    ))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, "square", (a,), (
        lambda g: g * (2.0 * a.data),
    ))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _result(data, "exp", (a,), (lambda g: g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _result(data, "log", (a,), (lambda g: g / a.data,))


def arctan(a) -> Tensor:
    a = as_tensor(a)
    data = np.arctan(a.data)
    return _result(data, "arctan", (a,), (
        lambda g: g / (1.0 + a.data * a.data),
    ))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.data.dtype), "relu", (a,), (
        lambda g: g * mask,
    ))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, a.data * slope)
    return _result(data, "leaky_relu", (a,), (
        lambda g: np.where(mask, g, g * slope),
    ))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _result(data, "matmul", (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape) if keepdims or g.ndim == 0 else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    return _result(np.asarray(data), "sum", (a,), (
        lambda g: np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)),
    ))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax % len(shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return _result(np.asarray(data), "mean", (a,), (
        lambda g: np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)) / count,
    ))


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _result(data, "reshape", (a,), (
        lambda g: g.reshape(a.data.shape),
    ))


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))
    return _result(data, "transpose", (a,), (
        lambda g: g.transpose(inverse),
    ))


def take(a, index) -> Tensor:
    """Basic slicing with gradient scatter-add into the source shape."""
    a = as_tensor(a)
    data = a.data[index]

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] += g
        return buf

    return _result(np.ascontiguousarray(data), "take", (a,), (grad_fn,))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat of an empty sequence")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(lo, hi)
            return np.ascontiguousarray(g[tuple(slicer)])

        return fn

    return _result(data, "concat", parts, tuple(make_fn(i) for i in range(len(parts))))


# -- strided convolution ------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square stride/padding.

    ``w`` has shape (C_out, C_in, kh, kw). Backed by im2col so both stride-1
    and stride-2 cases reduce to matmul.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]

    # im2col, kernel-position-major: rows grouped (i, j, cin) so each kernel
    # offset fills one contiguous slab.
    cols = np.empty((kh * kw * cin, n * ho * wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            slab = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
            idx = i * kw + j
            cols[idx * cin:(idx + 1) * cin] = \
                slab.transpose(1, 0, 2, 3).reshape(cin, n * ho * wo)
    w_mat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols.T @ w_mat                                  # (n*ho*wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)
    data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def grad_x(g):
        g_cols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dcols = w_mat @ g_cols.T                          # (kh*kw*cin, n*ho*wo)
        dxp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                idx = i * kw + j
                slab = dcols[idx * cin:(idx + 1) * cin].reshape(cin, n, ho, wo)
                dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    slab.transpose(1, 0, 2, 3)
        if padding:
            return dxp[:, :, padding:hp - padding, padding:wp - padding]
        return dxp

    def grad_w(g):
        g_cols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = cols @ g_cols                                # (kh*kw*cin, cout)
        return dw.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)

    grad_fns = [grad_x, grad_w]
    if b is not None:
        grad_fns.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _result(data, "conv2d", parents, tuple(grad_fns))
