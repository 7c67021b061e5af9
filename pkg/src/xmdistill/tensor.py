"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient.  Outside a tape every op is a plain
numpy computation and the result is a constant.  There is no implicit
broadcasting: binary ops require equal shapes, and the only mixed-shape ops
are the explicit ones (``bias_add``, scalar arithmetic, ``concat``,
reductions).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

COSINE_EPS = 1e-8

__all__ = [
    "COSINE_EPS",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "KinkMonitor",
    "Tensor",
    "add",
    "backward",
    "bias_add",
    "bmm",
    "concat",
    "cosine_similarity",
    "cross_entropy",
    "detach",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mean_pool",
    "mul",
    "pairwise_cosine",
    "relu",
    "reshape",
    "scale",
    "shift",
    "sigmoid",
    "softmax",
    "sub",
    "tanh",
    "tensor_sum",
    "transpose",
]


class ShapeError(ValueError):
    """Raised on incompatible shapes or invalid axes."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager; a tape is consumed (and cleared) by
    :func:`backward` unless ``retain=True`` is passed.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()
        self.consumed = True


class Tensor:
    """Row-major float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor{' ' + name if name else ''}")
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; scalars are explicit scale/shift ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use mul")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None):
        return tensor_sum(self, axes)

    def mean(self, axes=None):
        return mean(self, axes)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(parents), grad_fn))
    return out


def backward(loss: Tensor, retain: bool = False) -> None:
    """Propagate d(loss)/d(.) to every reachable tensor that requires grad.

    Leaf gradients accumulate into ``.grad``; call ``zero_grad`` between
    steps.  Intermediate tensors get their gradient overwritten.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, grad_fn in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for p, pg in zip(parents, grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                pending[key] = pending[key] + pg if key in pending else pg
    if not retain:
        tape.clear()


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(x.data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted({_axis(ndim, a) for a in axes}))
    return out


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda g: (g * s,))


def shift(a: Tensor, s: float) -> Tensor:
    return _record(a.data + s, (a,), lambda g: (g,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n], the one sanctioned row broadcast."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: cannot add bias {b.shape} to {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


class KinkMonitor:
    """Records the smallest |input| seen by relu while active, i.e. how close
    a computation came to a non-differentiable point."""

    def __init__(self) -> None:
        self.margin = np.inf

    def __enter__(self) -> "KinkMonitor":
        _local.kinks = self
        return self

    def __exit__(self, *exc) -> None:
        _local.kinks = None


def relu(x: Tensor) -> Tensor:
    monitor = getattr(_local, "kinks", None)
    if monitor is not None:
        monitor.margin = min(monitor.margin, float(np.abs(x.data).min()))
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise NonFiniteError("log of non-positive value")
    return _record(np.log(d), (x,), lambda g: (g / d,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or (-1 in shape):
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got rank {x.ndim}")
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis`` (last by default); other extents must agree."""
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].ndim
    ax = _axis(nd, axis)
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


# ---------------------------------------------------------------- reductions


def tensor_sum(x: Tensor, axes=None) -> Tensor:
    ax = _axes(x.ndim, axes)
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record(x.data.sum(axis=ax), (x,), grad_fn)


def mean(x: Tensor, axes=None) -> Tensor:
    ax = _axes(x.ndim, axes)
    n = int(np.prod([x.shape[a] for a in ax]))
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _record(x.data.mean(axis=ax), (x,), grad_fn)


def mean_pool(x: Tensor, axes) -> Tensor:
    """Global average over ``axes``."""
    return mean(x, axes)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x.ndim, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x.ndim, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(y, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


# ---------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [n,m,k] x [n,k,p] -> [n,m,p]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: dimension mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record(ad @ bd, (a, b), grad_fn)


# ---------------------------------------------------------------- similarity


def cosine_similarity(x: Tensor, y: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine of paired vectors: scalar for rank-1 inputs, one value per row
    for rank-2 inputs.  Denominator is ``max(|x||y|, eps)``."""
    _same_shape(x, y, "cosine_similarity")
    if x.ndim not in (1, 2):
        raise ShapeError(f"cosine_similarity expects rank 1 or 2, got {x.ndim}")
    xd, yd = x.data, y.data
    nx = np.sqrt((xd * xd).sum(axis=-1))
    ny = np.sqrt((yd * yd).sum(axis=-1))
    raw = nx * ny
    free = raw > eps
    den = np.where(free, raw, eps)
    dot = (xd * yd).sum(axis=-1)
    phi = dot / den

    def grad_fn(g):
        g = np.asarray(g)
        gd = (g / den)[..., None]
        cx = np.where(free, phi / np.where(free, nx * nx, 1.0), 0.0)[..., None]
        cy = np.where(free, phi / np.where(free, ny * ny, 1.0), 0.0)[..., None]
        gg = np.asarray(g)[..., None]
        return gd * yd - gg * cx * xd, gd * xd - gg * cy * yd

    return _record(phi, (x, y), grad_fn)


def pairwise_cosine(x: Tensor, y: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """S[i, j] = cos(x_i, y_j) for x[n, d], y[m, d]."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_cosine: incompatible {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    nx = np.sqrt((xd * xd).sum(axis=1))
    ny = np.sqrt((yd * yd).sum(axis=1))
    raw = np.outer(nx, ny)
    free = raw > eps
    den = np.where(free, raw, eps)
    s = (xd @ yd.T) / den

    def grad_fn(g):
        a = g / den
        w = np.where(free, g * s, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            rx = np.where(nx > 0, w.sum(axis=1) / np.where(nx > 0, nx * nx, 1.0), 0.0)
            ry = np.where(ny > 0, w.sum(axis=0) / np.where(ny > 0, ny * ny, 1.0), 0.0)
        return a @ yd - rx[:, None] * xd, a.T @ xd - ry[:, None] * yd

    return _record(s, (x, y), grad_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _record(np.array(loss), (logits,), grad_fn)

