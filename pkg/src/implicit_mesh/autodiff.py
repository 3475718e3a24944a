"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the toolkit is a :class:`Tensor`.  Operations
on tensors that require gradients append a node to an implicit tape; node
sequence numbers increase monotonically, so a node's inputs always precede it.
:func:`backward` walks the nodes reachable from a scalar loss in strict reverse
sequence order and accumulates vector-Jacobian products.

All data is stored in double precision.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_sequence = itertools.count()
_state = threading.local()


def _grad_mode():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_mode()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """Dense double-precision array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "node", "grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, op, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    if _grad_mode() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    else:
        out.requires_grad = False
    return out


def custom_op(data, op, inputs, vjp):
    """Record an op with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    return _record(np.asarray(data, dtype=np.float64), op, tuple(inputs), vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise binary


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        gb = g / bd
        return _unbroadcast(gb, ad.shape), _unbroadcast(-gb * out, bd.shape)

    return _record(out, "div", (a, b), vjp)


def minimum(a, b):
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    pick = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _record(np.where(pick, a.data, b.data), "minimum", (a, b),
                   lambda g: (_unbroadcast(g * pick, sa), _unbroadcast(g * ~pick, sb)))


def maximum(a, b):
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    pick = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record(np.where(pick, a.data, b.data), "maximum", (a, b),
                   lambda g: (_unbroadcast(g * pick, sa), _unbroadcast(g * ~pick, sb)))


def where(cond, a, b):
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(np.where(cond, a.data, b.data), "where", (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# ----------------------------------------------------------------------------
# elementwise unary


def neg(x):
    x = as_tensor(x)
    return _record(-x.data, "neg", (x,), lambda g: (-g,))


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    xd = x.data
    return _record(xd ** p, "pow", (x,), lambda g: (g * p * xd ** (p - 1.0),))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _record(out, "sqrt", (x,), vjp)


def abs(x):
    x = as_tensor(x)
    s = np.sign(x.data)
    return _record(np.abs(x.data), "abs", (x,), lambda g: (g * s,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, "exp", (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), "log", (x,), lambda g: (g / xd,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _record(out, "softplus", (x,), lambda g: (g * _stable_sigmoid(xd),))


def clip(x, lo=None, hi=None):
    x = as_tensor(x)
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd > lo
    if hi is not None:
        inside &= xd < hi
    return _record(out, "clip", (x,), lambda g: (g * inside,))


# ----------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    if count == 0:
        raise DimensionError(f"mean: empty reduction over shape {shape}")
    return _record(np.mean(x.data, axis=axis, keepdims=keepdims), "mean", (x,),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


def l2norm(x, axis=None, keepdims=False):
    """Euclidean norm; the subgradient at the origin is zero."""
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=keepdims))

    def vjp(g):
        n = _expand_reduced(out, xd.shape, axis, keepdims)
        ge = _expand_reduced(g, xd.shape, axis, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, ge * xd / safe, 0.0),)

    return _record(out, "l2norm", (x,), vjp)


def l1norm(x, axis=None, keepdims=False):
    x = as_tensor(x)
    xd = x.data
    s = np.sign(xd)
    return _record(np.sum(np.abs(xd), axis=axis, keepdims=keepdims), "l1norm", (x,),
                   lambda g: (_expand_reduced(g, xd.shape, axis, keepdims) * s,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, "softmax", (x,), vjp)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    w = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    shape = x.shape
    return _record(out, "logsumexp", (x,),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims) * w,))


# ----------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        return ga, gb

    return _record(out, "matmul", (a, b), vjp)


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {shape}") from None
    return _record(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(x.data, axes), "transpose", (x,),
                   lambda g: (np.transpose(g, inv),))


def broadcast(x, shape):
    """Broadcast ``x`` to ``shape`` (materialized view)."""
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast: cannot broadcast {src} to {tuple(shape)}") from None
    return _record(out, "broadcast", (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts),
                   lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")
    n = len(ts)
    return _record(np.stack([t.data for t in ts], axis=axis), "stack", tuple(ts),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(x, idx):
    """Basic or fancy indexing; repeated fancy indices accumulate gradient."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise DimensionError(f"index: {exc} for shape {x.shape}") from None
    shape = x.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        gx = np.zeros(shape)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _record(np.array(out, dtype=np.float64), "index", (x,), vjp)


def take_rows(x, rows):
    """Gather ``x[rows]`` along the first axis (fast path for integer arrays)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    n = x.shape[0]
    if rows.size and (rows.min() < -n or rows.max() >= n):
        raise DimensionError(f"take_rows: index out of range for shape {x.shape}")
    rows = rows % n if rows.size else rows
    shape = x.shape

    def vjp(g):
        return (segment_sum_array(g.reshape((-1,) + shape[1:]), rows.reshape(-1), n),)

    return _record(x.data[rows], "index", (x,), vjp)


def segment_sum_array(values, segments, n):
    """Sum rows of ``values`` into ``n`` buckets in a fixed order."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(segments, weights=values, minlength=n)
    flat = values.reshape(values.shape[0], -1)
    out = np.empty((n, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(segments, weights=flat[:, j], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def segment_sum(x, segments, n):
    """out[s] = sum of x[i] over rows i with segments[i] == s."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != x.shape[0]:
        raise DimensionError(f"segment_sum: {segments.shape[0]} segment ids for {x.shape[0]} rows")
    return _record(segment_sum_array(x.data, segments, n), "segment_sum", (x,),
                   lambda g: (g[segments],))


def _bilinear_setup(shape_hw, xy):
    h, w = shape_hw
    fx = xy[:, 0] - 0.5
    fy = xy[:, 1] - 0.5
    inx = (fx > 0) & (fx < w - 1)
    iny = (fy > 0) & (fy < h - 1)
    fx = np.clip(fx, 0.0, max(w - 1, 0))
    fy = np.clip(fy, 0.0, max(h - 1, 0))
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = fx - x0
    wy = fy - y0
    return x0, x1, y0, y1, wx, wy, inx, iny


def bilinear_gather(image, xy):
    """Bilinearly sample ``image`` (H, W[, C]) at continuous pixel coords ``xy`` (N, 2).

    ``xy[:, 0]`` runs along columns and ``xy[:, 1]`` along rows; pixel (r, c)
    has its center at (c + 0.5, r + 0.5).  Coordinates are clamped to the
    lattice of pixel centers, where the gradient w.r.t. ``xy`` is zero.
    """
    image, xy = as_tensor(image), as_tensor(xy)
    if image.ndim not in (2, 3) or xy.ndim != 2 or xy.shape[1] != 2:
        raise DimensionError(f"bilinear_gather: image {image.shape}, coords {xy.shape}")
    img = image.data
    h, w = img.shape[:2]
    x0, x1, y0, y1, wx, wy, inx, iny = _bilinear_setup((h, w), xy.data)
    if img.ndim == 3:
        wxe, wye = wx[:, None], wy[:, None]
    else:
        wxe, wye = wx, wy
    i00, i01, i10, i11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    top = i00 + (i01 - i00) * wxe
    bot = i10 + (i11 - i10) * wxe
    out = top + (bot - top) * wye
    shape = img.shape

    def vjp(g):
        gimg = None
        if image.requires_grad:
            flat = np.zeros((h * w,) + shape[2:])
            n = h * w
            for yy, xx, ww in ((y0, x0, (1 - wxe) * (1 - wye)), (y0, x1, wxe * (1 - wye)),
                               (y1, x0, (1 - wxe) * wye), (y1, x1, wxe * wye)):
                flat += segment_sum_array(g * ww, yy * w + xx, n)
            gimg = flat.reshape(shape)
        dx = (1 - wye) * (i01 - i00) + wye * (i11 - i10)
        dy = bot - top
        if img.ndim == 3:
            gx = np.sum(g * dx, axis=1)
            gy = np.sum(g * dy, axis=1)
        else:
            gx, gy = g * dx, g * dy
        gxy = np.stack([gx * inx, gy * iny], axis=1)
        return gimg, gxy

    return _record(out, "bilinear_gather", (image, xy), vjp)


# ----------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Nodes reachable from an output, in append (sequence) order."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(nodes=[t.node for t in found], outputs=found)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None, tape: Tape | None = None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a list of gradient arrays aligned with ``wrt`` (zeros for leaves
    the loss does not depend on).  Without ``wrt``, returns a dict mapping each
    reached grad-enabled leaf to its gradient.  Leaf ``.grad`` fields are set.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward: loss must be a scalar tensor, got {shape}")
    if tape is None:
        tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out in reversed(tape.outputs):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        contribs = out.node.vjp(g)
        for inp, gi in zip(out.node.inputs, contribs):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
            if inp.node is None:
                leaves[key] = inp
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = grads[key]
    if wrt is None:
        return result
    out = []
    for t in wrt:
        g = grads.get(id(t)) if id(t) in leaves else None
        out.append(np.zeros(t.shape) if g is None else g)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences."""
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("grad_check: non-finite value at the base point")
    (analytic,) = backward(y, [xt])
    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            vals = []
            for step in (eps, -eps):
                xp = flat.copy()
                xp[i] += step
                v = f(Tensor(xp.reshape(x0.shape))).data
                if not np.all(np.isfinite(v)):
                    raise NumericError(f"grad_check: non-finite value perturbing index {i}")
                vals.append(float(np.sum(v)))
            numeric[i] = (vals[0] - vals[1]) / (2.0 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0


# ----------------------------------------------------------------------------
# op registry


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "l2norm": l2norm,
    "l1norm": l1norm,
    "softmax": softmax,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "index": index,
    "bilinear_gather": bilinear_gather,
    "broadcast": broadcast,
    "neg": neg,
    "sqrt": sqrt,
    "abs": abs,
    "square": square,
    "softplus": softplus,
    "minimum": minimum,
    "maximum": maximum,
    "reshape": reshape,
    "transpose": transpose,
}

OP_KINDS = tuple(_OPS)


def eval_graph(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Evaluate a registered op by name, recording it on the tape."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)
