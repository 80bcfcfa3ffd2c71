"""Small dense-array engine with tape-based reverse-mode differentiation.

Every trainable computation in the package (intrinsic encoder, router,
translator backbone, losses) is expressed with the operations defined here.
Arrays are numpy ``float32`` by default; ``float64`` inputs stay ``float64``
so that finite-difference checks can run at higher precision.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LAYERNORM_EPS = 1e-5

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MaddCounter:
    """Accumulates multiply-add counts of matrix products executed while active."""

    def __init__(self):
        self.madds = 0

    def add(self, n: int):
        self.madds += int(n)


def _counters() -> list:
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    return stack


@contextlib.contextmanager
def count_madds(counter: MaddCounter | None = None):
    counter = counter if counter is not None else MaddCounter()
    stack = _counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def record_madds(n: int):
    for c in _counters():
        c.add(n)


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    if isinstance(data, (np.floating,)) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """Array node of the computation graph.

    ``grad`` is allocated lazily by :func:`backward`; it is ``None`` for
    tensors that no gradient reached.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce("variance", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced non-finite values")


# -- broadcasting ----------------------------------------------------------
def broadcast_shape(*shapes) -> tuple:
    ndim = max(len(s) for s in shapes)
    padded = [(1,) * (ndim - len(s)) + tuple(s) for s in shapes]
    out = []
    for dims in zip(*padded):
        sizes = {d for d in dims if d != 1}
        if len(sizes) > 1:
            raise ShapeError(f"shapes {shapes} are not broadcast-compatible")
        out.append(sizes.pop() if sizes else 1)
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return unbroadcast(g / b.data, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    broadcast_shape(a.shape, b.shape)
    take_a = a.data >= b.data

    def bw(g):
        return unbroadcast(g * take_a, a.shape), unbroadcast(g * ~take_a, b.shape)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def absolute(a) -> Tensor:
    a = _lift(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a) -> Tensor:
    # tanh approximation
    a = _lift(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


_UNARY = {
    "exp": exp,
    "log": log,
    "relu": relu,
    "gelu": gelu,
    "neg": neg,
    "square": square,
    "sqrt": sqrt,
    "abs": absolute,
    "tanh": tanh,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- structural ------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _lift(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = _lift(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., M, P] @ b[..., P, N]``.

    Leading batch dimensions broadcast (match or 1).
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    batch = broadcast_shape(a.shape[:-2], b.shape[:-2])
    m, p = a.shape[-2:]
    n = b.shape[-1]
    record_madds(int(np.prod(batch, dtype=np.int64)) * m * p * n)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# -- reductions ------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError("repeated reduction axis")
    return axes


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Reduction over ``axis``: one of ``sum``, ``mean``, ``max``, ``variance``.

    ``variance`` is the population variance. ``max`` routes the gradient to
    the first maximal element along the reduced axes.
    """
    x = _lift(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    if count == 0:
        raise ShapeError("empty reduction axis")

    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims).copy(),), "sum")
    if kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _make(
            out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims) / count,), "mean"
        )
    if kind == "variance":
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        out = (centered * centered).mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (_expand(g, x.shape, axes, keepdims) * (2.0 / count) * centered,)

        return _make(out, (x,), bw, "variance")
    if kind == "max":
        keep = [a for a in range(x.ndim) if a not in axes]
        moved = np.transpose(x.data, keep + list(axes))
        kept_shape = moved.shape[: len(keep)]
        flat = moved.reshape(kept_shape + (count,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape([1 if a in axes else s for a, s in enumerate(x.shape)])

        def bw(g):
            g = g.reshape(kept_shape)
            gflat = np.zeros(flat.shape, dtype=x.dtype)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

        return _make(np.ascontiguousarray(out), (x,), bw, "max")
    raise ValueError(f"unknown reduction {kind!r}")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), bw, "logsumexp")


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction."""
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layernorm(x, gain=None, bias=None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _lift(x)
    gain = _lift(gain) if gain is not None else Tensor(np.ones(x.shape[-1], dtype=x.dtype))
    bias = _lift(bias) if bias is not None else Tensor(np.zeros(x.shape[-1], dtype=x.dtype))
    out_shape = broadcast_shape(x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat_x = unbroadcast(g * gain.data, x.shape)
        mean_d = dxhat_x.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat_x * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat_x - mean_d - xhat * mean_dx)
        return (
            unbroadcast(dx, x.shape),
            unbroadcast(g * xhat, gain.shape),
            unbroadcast(g, bias.shape),
        )

    return _make(out, (x, gain, bias), bw, "layernorm")


def avg_pool2d(x, out_h: int, out_w: int) -> Tensor:
    """Block-mean downsampling of the last two axes."""
    x = _lift(x)
    h, w = x.shape[-2:]
    if out_h <= 0 or out_w <= 0 or h % out_h or w % out_w:
        raise ShapeError(f"cannot pool {h}x{w} to {out_h}x{out_w}")
    kh, kw = h // out_h, w // out_w
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (out_h, kh, out_w, kw))
    nd = len(lead)
    out = blocks.mean(axis=(nd + 1, nd + 3))

    def bw(g):
        g = g[..., :, None, :, None] / (kh * kw)
        return (np.broadcast_to(g, blocks.shape).reshape(x.shape).copy(),)

    return _make(out, (x,), bw, "avg_pool2d")


# -- reverse mode ----------------------------------------------------------
class Tape:
    """Operations reachable from a root, in execution (topological) order."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray):
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Intermediate nodes do not keep their gradients.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    Tape(root).run(root, np.ones_like(root.data))


@dataclass
class GradCheckReport:
    analytic: list
    numeric: list
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def grad_check(
    f: Callable[..., Tensor],
    point,
    step: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central finite differences.

    ``point`` is one array or a sequence of arrays, passed to ``f`` as
    tensors. Evaluation is done in float64. The relative error per
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [
        np.array(p, dtype=np.float64) for p in point
    ]

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*inputs)
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    numeric = []
    with no_grad():
        for k, base in enumerate(arrays):
            num = np.zeros_like(base)
            flat = num.reshape(-1)
            for i in range(base.size):
                vals = []
                for sign in (1.0, -1.0):
                    shifted = [a.copy() for a in arrays]
                    shifted[k].reshape(-1)[i] += sign * step
                    vals.append(float(f(*[Tensor(s) for s in shifted]).data.reshape(-1)[0]))
                flat[i] = (vals[0] - vals[1]) / (2.0 * step)
            numeric.append(num)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return GradCheckReport(analytic, numeric, worst, tol)


def parameters_checksum(arrays) -> str:
    """SHA-256 over parameter bytes; a mapping is hashed by sorted name, with names."""
    import hashlib

    h = hashlib.sha256()
    if isinstance(arrays, dict):
        items = sorted(arrays.items())
    else:
        items = [("", a) for a in arrays]
    for name, a in items:
        a = a.data if isinstance(a, Tensor) else a
        h.update(name.encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
