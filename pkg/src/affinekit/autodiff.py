"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the graph in reverse creation order, so
accumulation order is fixed and results are bit-reproducible.

Broadcasting is restricted to leading axes: an operand may be combined with
a larger one only if its shape (after dropping leading 1s) is a suffix of
the larger shape. Anything else must go through :func:`expand` explicitly.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_default_dtype = np.float32
_ids = itertools.count()


class DimensionError(ValueError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


class GradCheckError(AssertionError):
    pass


def default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new leaf tensors are created with."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype)
        self.data = np.array(data, dtype=dtype, copy=True)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self._id = next(_ids)
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite output from op '{op}'")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._id = next(_ids)
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- broadcasting helpers ---------------------------------------------------

def _strip_leading_ones(shape: tuple[int, ...]) -> tuple[int, ...]:
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    sa, sb = _strip_leading_ones(a), _strip_leading_ones(b)
    if len(sa) <= len(sb) and b[len(b) - len(sa):] == sa and len(a) <= len(b):
        return b
    if len(sb) <= len(sa) and a[len(a) - len(sb):] == sb and len(b) <= len(a):
        return a
    raise DimensionError(f"{op}: shapes {a} and {b} are not leading-axis broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bw(g):
        a._accumulate(g * c)

    return Tensor._result(a.data * c, (a,), "scale", bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bw(g):
        a._accumulate(g)

    return Tensor._result(a.data + c, (a,), "add_scalar", bw)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    pos = x.data > 0

    def bw(g):
        x._accumulate(g * pos)

    return Tensor._result(np.where(pos, x.data, x.data.dtype.type(0)), (x,), "relu", bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    dt = v.dtype.type
    v2 = v * v
    inner = dt(_GELU_C) * (v + dt(0.044715) * v2 * v)
    th = np.tanh(inner)
    out = dt(0.5) * v * (dt(1) + th)

    def bw(g):
        dinner = dt(_GELU_C) * (dt(1) + dt(3 * 0.044715) * v2)
        d = dt(0.5) * (dt(1) + th) + dt(0.5) * v * (dt(1) - th * th) * dinner
        x._accumulate(g * d)

    return Tensor._result(out, (x,), "gelu", bw)


def silu(x: Tensor) -> Tensor:
    v = x.data
    dt = v.dtype.type
    sig = dt(1) / (dt(1) + np.exp(-v))
    out = v * sig

    def bw(g):
        x._accumulate(g * sig * (dt(1) + v * (dt(1) - sig)))

    return Tensor._result(out, (x,), "silu", bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g * 2 * x.data)

    return Tensor._result(x.data * x.data, (x,), "square", bw)


# -- reductions and shape ops ----------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._result(np.asarray(out), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[i] for i in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._result(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return Tensor._result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), "transpose", bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise DimensionError(f"expand: rank of {x.shape} differs from target {shape}")
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)

    def bw(g):
        x._accumulate(g.sum(axis=axes, keepdims=True) if axes else g)

    return Tensor._result(out, (x,), "expand", bw)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bw(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        x._accumulate(full)

    return Tensor._result(out, (x,), "getitem", bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    index = [slice(None)] * x.ndim
    index[axis] = indices
    return getitem(x, tuple(index))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._result(out, tensors, "concat", bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of numpy's per-matrix loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            if flat:
                a._accumulate((g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape))
            else:
                a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._result(out, (a, b), "matmul", bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._result(y, (x,), "softmax", bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm params {gain.shape}/{bias.shape} do not match last dim {d}")
    dt = x.data.dtype.type
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = dt(1) / np.sqrt(var + dt(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)

    return Tensor._result(out, (x, gain, bias), "layernorm", bw)


def im2col(x: Tensor, k: int) -> Tensor:
    """Same-padded k×k patches of a channel-last image batch ``[B, H, W, C]``."""
    if k % 2 != 1:
        raise DimensionError("im2col supports odd kernel sizes only")
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    offsets = [(i, j) for i in range(k) for j in range(k)]
    cols = np.stack([xp[:, i:i + H, j:j + W, :] for i, j in offsets], axis=3)

    def bw(g):
        g = g.reshape(B, H, W, k * k, C)
        gp = np.zeros_like(xp)
        for idx, (i, j) in enumerate(offsets):
            gp[:, i:i + H, j:j + W, :] += g[:, :, :, idx, :]
        x._accumulate(gp[:, p:p + H, p:p + W, :])

    return Tensor._result(cols.reshape(B, H, W, k * k * C), (x,), "im2col", bw)


# -- backward pass ----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward(); re-run forward")
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        order.append(t)
        stack.extend(t._parents)
    order.sort(key=lambda t: t._id, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in order:
        if t._backward is None:
            continue
        g = t.grad
        if g is None:
            continue
        t._backward(g)
        # interior nodes drop their grad buffer once pushed upstream
        if t is not loss:
            t.grad = None
        t._backward = None
        t._parents = ()
    loss._consumed = True


# -- finite-difference checking --------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |numeric|).

    ``f`` must rebuild the graph on each call. Params should be float64.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"non-finite loss probing param {pi} coordinate {i}")
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[pi].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
