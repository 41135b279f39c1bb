"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the differentiable operations
defined here, so gradients computed with ``create_graph=True`` are graph
nodes themselves and can be differentiated again. Second-order support
covers the closure used on the score path: conv2d, relu, max_pool2, global
average pooling, matmul/dot, elementwise arithmetic, abs, l2_normalize,
euclidean_norm, sigmoid, bilinear upsampling and the reshaping helpers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "set_grad_enabled",
    "is_grad_enabled",
    "grad",
    "backward",
    "finite_diff_check",
]

NORM_EPS = 1e-12


class GraphError(RuntimeError):
    """Raised for detached, non-scalar or disconnected differentiation requests."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def set_grad_enabled(enabled: bool):
    prev = is_grad_enabled()
    _mode.enabled = bool(enabled)
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """A dense float64 array that can take part in a computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "__weakref__")
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    @property
    def graph_node(self):
        """``(op name, parents)`` of the producing operation, or None for leaves."""
        if self._vjp is None:
            return None
        return self.op, self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out.op = "leaf"
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple, vjp: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    return _result(t.data.reshape(tuple(shape)), (t,), lambda g: (reshape(g, old),), "reshape")


def transpose(t, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(t.data, axes), (t,), lambda g: (transpose(g, inverse),), "transpose")


def swap_last(t) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


def broadcast_to(t, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)
    if t.shape == shape:
        return t
    old = t.shape
    data = np.broadcast_to(t.data, shape).copy()
    return _result(data, (t,), lambda g: (sum_to(g, old),), "broadcast_to")


def _sum_to_array(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def sum_to(t, shape) -> Tensor:
    """Sum a broadcast tensor back down to ``shape`` (adjoint of broadcast_to)."""
    t = as_tensor(t)
    shape = tuple(shape)
    if t.shape == shape:
        return t
    old = t.shape
    return _result(_sum_to_array(t.data, shape), (t,), lambda g: (broadcast_to(g, old),), "sum_to")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    axes = _norm_axes(axis, t.ndim)
    old = t.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(old))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), old),)

    return _result(t.data.sum(axis=axes, keepdims=keepdims), (t,), vjp, "sum")


def mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    axes = _norm_axes(axis, t.ndim)
    count = int(np.prod([t.shape[a] for a in axes])) if axes else 1
    return mul(sum_(t, axis=axes, keepdims=keepdims), 1.0 / count)


def take(t, indices, n: int | None = None) -> Tensor:
    """Select rows along axis 0."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.intp)
    rows = t.shape[0]
    return _result(t.data[idx], (t,), lambda g: (scatter_rows(g, idx, rows),), "take")


def scatter_rows(t, indices, rows: int) -> Tensor:
    """Adjoint of :func:`take`: add rows of ``t`` into a zero tensor of ``rows`` rows."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.zeros((rows,) + t.shape[1:])
    np.add.at(out, idx, t.data)
    return _result(out, (t,), lambda g: (take(g, idx),), "scatter_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if axis != 0:
        raise ShapeError("concat only supports axis 0")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def vjp(g):
        return tuple(take(g, np.arange(bounds[i], bounds[i + 1])) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), vjp, "concat")


def stack(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, (1,) + t.shape) for t in tensors])


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")

    def vjp(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), vjp, "div")


def relu(t) -> Tensor:
    """max(v, 0); the subgradient at 0 is 0."""
    t = as_tensor(t)
    mask = (t.data > 0).astype(np.float64)
    return _result(t.data * mask, (t,), lambda g: (mul(g, mask),), "relu")


def abs_(t) -> Tensor:
    """|v| with subgradient 0 at 0."""
    t = as_tensor(t)
    sign = np.sign(t.data)
    return _result(np.abs(t.data), (t,), lambda g: (mul(g, sign),), "abs")


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t) -> Tensor:
    t = as_tensor(t)

    def vjp(g):
        s = sigmoid(t)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _result(_sigmoid_array(t.data), (t,), vjp, "sigmoid")


def sqrt(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    return _result(np.sqrt(t.data), (t,), lambda g: (div(mul(g, 0.5), sqrt(t)),), "sqrt")


def maximum(t, floor: float) -> Tensor:
    """max(v, floor) against a constant; ties pass no gradient."""
    t = as_tensor(t)
    mask = (t.data > floor).astype(np.float64)
    return _result(np.maximum(t.data, floor), (t,), lambda g: (mul(g, mask),), "maximum")


def _first_extreme_mask(x: np.ndarray, axes: tuple, largest: bool) -> np.ndarray:
    """One-hot mask (first index in C order) of the max/min over ``axes``."""
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    pick = flat.argmax(axis=-1) if largest else flat.argmin(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, pick[..., None], 1.0, axis=-1)
    return np.transpose(onehot.reshape(moved.shape), np.argsort(perm))


def amax(t, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; gradient goes to the first maximiser."""
    t = as_tensor(t)
    axes = _norm_axes(axis, t.ndim)
    return sum_(mul(t, _first_extreme_mask(t.data, axes, True)), axis=axes, keepdims=keepdims)


def amin(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    axes = _norm_axes(axis, t.ndim)
    return sum_(mul(t, _first_extreme_mask(t.data, axes, False)), axis=axes, keepdims=keepdims)


def elementwise(op: str, a, b=None) -> Tensor:
    """Strict-shape elementwise op: ``add``, ``sub``, ``mul`` or ``abs``."""
    a = as_tensor(a)
    if op == "abs":
        if b is not None:
            raise ShapeError("abs takes a single operand")
        return abs_(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    fn = {"add": add, "sub": sub, "mul": mul}.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and reductions used by the encoder / attention path
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def dot(a, b) -> Tensor:
    """Inner product along the last axis (a scalar for vectors)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot length mismatch {a.shape} vs {b.shape}")
    return sum_(mul(a, b), axis=-1)


def euclidean_norm(t, axis=-1) -> Tensor:
    """sqrt(sum v^2) along ``axis``.

    The value is exact (the zero vector maps to 0); the backward rule divides by
    sqrt(sum v^2 + 1e-12) so the gradient stays finite at the origin.
    """
    t = as_tensor(t)
    axis = axis % t.ndim if t.ndim else 0

    def vjp(g):
        stab = sqrt(add(sum_(mul(t, t), axis=axis, keepdims=True), NORM_EPS))
        g = reshape(g, g.shape[:axis] + (1,) + g.shape[axis:])
        return (mul(g, div(t, stab)),)

    value = np.sqrt(np.sum(t.data * t.data, axis=axis))
    return _result(value, (t,), vjp, "euclidean_norm")


def l2_normalize(t, axis=-1) -> Tensor:
    """t / max(||t||, 1e-12) along ``axis``."""
    t = as_tensor(t)
    n = maximum(euclidean_norm(t, axis=axis), NORM_EPS)
    n = reshape(n, n.shape[: axis % t.ndim] + (1,) + n.shape[axis % t.ndim :])
    return div(t, n)


def global_average_pool(t) -> Tensor:
    """Spatial mean: (m,n) -> scalar, (m,n,c) -> (c,), (B,m,n,c) -> (B,c)."""
    t = as_tensor(t)
    if t.ndim == 2:
        return mean(t)
    if t.ndim == 3:
        return mean(t, axis=(0, 1))
    if t.ndim == 4:
        return mean(t, axis=(1, 2))
    raise ShapeError(f"global_average_pool expects 2-4 dims, got {t.shape}")


# ---------------------------------------------------------------------------
# convolution and pooling (NHWC; unbatched HWC inputs are accepted)
# ---------------------------------------------------------------------------

def pad2d(t, p: int) -> Tensor:
    t = as_tensor(t)
    if p == 0:
        return t
    widths = [(0, 0)] * t.ndim
    widths[-3] = widths[-2] = (p, p)
    return _result(np.pad(t.data, widths), (t,), lambda g: (crop2d(g, p),), "pad2d")


def crop2d(t, p: int) -> Tensor:
    t = as_tensor(t)
    if p == 0:
        return t
    data = t.data[..., p:-p, p:-p, :]
    return _result(data, (t,), lambda g: (pad2d(g, p),), "crop2d")


def im2col(x, k: int, stride: int) -> Tensor:
    """(B,H,W,C) -> (B,Ho,Wo,k*k*C) patches ordered (row, col, channel)."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, k * k * c)
    shape = x.shape
    return _result(cols, (x,), lambda g: (col2im(g, shape, k, stride),), "im2col")


def col2im(cols, shape: tuple, k: int, stride: int) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back onto an image."""
    cols = as_tensor(cols)
    b, h, w, c = shape
    ho, wo = cols.shape[1], cols.shape[2]
    patches = cols.data.reshape(b, ho, wo, k, k, c)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += patches[:, :, :, i, j, :]
    return _result(out, (cols,), lambda g: (im2col(g, k, stride),), "col2im")


def conv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlation of an HWC (or NHWC) input with k x k x c_in x c_out kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects HWC input and 4-d kernels, got {x.shape}, {kernels.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2 or cin != x.shape[3]:
        raise ShapeError(f"kernel {kernels.shape} incompatible with input channels {x.shape[3]}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be positive and padding non-negative")
    b, h, w, _ = x.shape
    for size in (h, w):
        span = size + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(f"spatial size {size} incompatible with k={k}, stride={stride}, pad={padding}")
    ho, wo = (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1
    cols = im2col(pad2d(x, padding), k, stride)
    out = matmul(reshape(cols, (b * ho * wo, k * k * cin)), reshape(kernels, (k * k * cin, cout)))
    out = reshape(out, (b, ho, wo, cout))
    if bias is not None:
        out = add(out, bias)
    if unbatched:
        out = reshape(out, out.shape[1:])
    return out


def max_pool2(t) -> Tensor:
    """2x2 non-overlapping max pool; gradient goes to the first maximiser of each window."""
    t = as_tensor(t)
    if t.ndim < 2:
        raise ShapeError("max_pool2 needs at least two spatial dims")
    # spatial axes are the first two of an HWC map, or (1, 2) of NHWC / (m, n) for 2-d
    if t.ndim == 2:
        return reshape(max_pool2(reshape(t, (1,) + t.shape + (1,))), (t.shape[0] // 2, t.shape[1] // 2))
    unbatched = t.ndim == 3
    x = reshape(t, (1,) + t.shape) if unbatched else t
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    pick = win.argmax(axis=-1)
    onehot = np.zeros_like(win)
    np.put_along_axis(onehot, pick[..., None], 1.0, axis=-1)
    mask = onehot.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
    out = sum_(reshape(mul(x, mask), (b, h // 2, 2, w // 2, 2, c)), axis=(2, 4))
    return reshape(out, out.shape[1:]) if unbatched else out


# ---------------------------------------------------------------------------
# bilinear resampling
# ---------------------------------------------------------------------------

def _interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (out_size, in_size)."""
    mat = np.zeros((out_size, in_size))
    if in_size == 1 or out_size == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(out_size) * (in_size - 1) / (out_size - 1)
    lo = np.minimum(np.floor(pos).astype(int), in_size - 2)
    frac = pos - lo
    rows = np.arange(out_size)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def sandwich(t, left: np.ndarray, right: np.ndarray) -> Tensor:
    """left @ t @ right.T over the last two axes, with constant matrices."""
    t = as_tensor(t)
    out = np.einsum("hm,...mn,wn->...hw", left, t.data, right, optimize=True)
    return _result(out, (t,), lambda g: (sandwich(g, left.T, right.T),), "sandwich")


def upsample_bilinear(t, height: int, width: int) -> Tensor:
    """Resize the last two axes of ``t`` to (height, width), corners aligned."""
    t = as_tensor(t)
    m, n = t.shape[-2], t.shape[-1]
    if height < m or width < n:
        raise ShapeError(f"cannot upsample {m}x{n} to smaller {height}x{width}")
    return sandwich(t, _interp_matrix(height, m), _interp_matrix(width, n))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def _run(output: Tensor, is_target: Callable[[Tensor], bool], create_graph: bool) -> dict:
    if output.size != 1:
        raise GraphError(f"can only differentiate a single-element tensor, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("output is detached from any tensor that requires grad")
    order = _topo_order(output)
    relevant = {}
    for node in order:
        relevant[id(node)] = is_target(node) or any(relevant.get(id(p), False) for p in node._parents)
    grads = {id(output): Tensor(np.ones_like(output.data))}
    found = {}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or not relevant[id(node)]:
                continue
            if is_target(node):
                found[id(node)] = (node, g)
            if node._vjp is None:
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not relevant.get(id(p), False):
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return found


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False,
         allow_unused: bool = False) -> list:
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    Only the part of the graph between ``output`` and ``inputs`` is traversed.
    With ``create_graph`` the returned tensors carry graph nodes.
    """
    inputs = list(inputs)
    ids = {id(t) for t in inputs}
    found = _run(output, lambda n: id(n) in ids, create_graph)
    out = []
    for t in inputs:
        if id(t) in found:
            out.append(found[id(t)][1])
        elif allow_unused:
            out.append(Tensor(np.zeros_like(t.data)))
        else:
            raise GraphError(f"input of shape {t.shape} is not connected to the output")
    return out


def backward(output: Tensor, create_graph: bool = False) -> dict:
    """Gradients of ``output`` for every reachable leaf with ``requires_grad``.

    Returns a dict keyed by the leaf tensors themselves (identity-hashed).
    """
    found = _run(output, lambda n: n._vjp is None, create_graph)
    return {node: g for node, g in found.values()}


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
                      kink_tol: float = 1e-2, return_details: bool = False):
    """Max relative error between ``grad`` and central differences of ``fn``.

    Coordinates that sit within ``10 * eps`` of a kink are skipped. A kink is
    detected when the one-sided slopes at scale h = 10 * eps disagree by more
    than ``kink_tol`` relative to their magnitude and the disagreement does not
    grow at scale 2h (smooth curvature would double it).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    y = fn(x)
    if y.size != 1:
        raise GraphError("finite_diff_check needs a scalar-valued function")
    (analytic,) = grad(y, [x], allow_unused=True)
    analytic = analytic.data.reshape(-1)

    def f(arr):
        # graph mode stays on so ``fn`` may itself differentiate internally
        return float(fn(Tensor(arr, requires_grad=True)).data.reshape(-1)[0])

    f0 = float(y.data.reshape(-1)[0])
    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    skipped = np.zeros(flat.size, dtype=bool)
    h = 10.0 * eps
    for i in range(flat.size):
        def at(delta):
            arr = flat.copy()
            arr[i] += delta
            return f(arr.reshape(x0.shape))

        numeric[i] = (at(eps) - at(-eps)) / (2.0 * eps)
        right, left = (at(h) - f0) / h, (f0 - at(-h)) / h
        jump = abs(right - left)
        if jump > kink_tol * max(abs(right), abs(left), 1e-8):
            jump2 = abs((at(2 * h) - f0) / (2 * h) - (f0 - at(-2 * h)) / (2 * h))
            skipped[i] = jump2 < 1.5 * jump
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    rel[skipped] = 0.0
    err = float(rel.max()) if rel.size else 0.0
    if return_details:
        return err, {"analytic": analytic, "numeric": numeric, "skipped": skipped, "relative": rel}
    return err
