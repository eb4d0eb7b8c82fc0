"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a fresh :class:`Tensor`.  When any input requires a
gradient the output keeps references to its parents plus a closure that maps
the output gradient to the input gradients.  :meth:`Tensor.backward` walks
the reachable graph in reverse construction order.

Calling ``backward`` twice on the same root, or into a leaf whose ``grad`` is
still populated, raises :class:`BackwardError`.  Reset with
:func:`zero_grad` (or ``param.grad = None``) between steps.
"""

from __future__ import annotations

import contextlib
import io
import itertools
import struct
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class BackwardError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)  # always copies


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 and op != "leaf" else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op
        self._id = next(_ids)
        self._consumed = False

    # -- basic properties ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise BackwardError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward() already ran on this graph; rebuild it")
        self._consumed = True
        if not self.requires_grad:
            return

        # collect nodes reachable through requires_grad edges
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes or not node.requires_grad:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)

        for node in nodes.values():
            if node.is_leaf and node.grad is not None:
                raise BackwardError(
                    "leaf tensor already holds a gradient; reset it with zero_grad() before a second backward"
                )

        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = np.array(g, dtype=np.float64)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # -- operator sugar -------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise ValueError(f"log: input has non-positive entries (min {a.data.min()!r}); add an epsilon")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a) -> Tensor:
    a = _wrap(a)
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float = np.inf) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input was inside."""
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def xlogx(a) -> Tensor:
    """``x * log(x)`` with the convention ``0 * log 0 = 0``."""
    a = _wrap(a)
    if np.any(a.data < 0):
        raise ValueError("xlogx: input has negative entries")
    pos = a.data > 0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(pos, a.data * np.log(safe), 0.0)

    def bw(g):
        return (np.where(pos, g * (np.log(safe) + 1.0), 0.0),)

    return _make(out, (a,), bw, "xlogx")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) / float(count)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max over one axis (or all). Gradient goes to the first maximal entry."""
    a = _wrap(a)
    if axis is None:
        flat = reshape(a, (a.size,))
        return tmax(flat, 0, keepdims=False) if not keepdims else reshape(tmax(flat, 0), (1,) * a.ndim)
    if not isinstance(axis, int):
        raise ShapeError("max: only a single axis is supported")
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, ax), gk, axis=ax)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, ax), (a,), bw, "max")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def take_columns(a, cols) -> Tensor:
    """Row-wise gather: ``out[b] = a[b, cols[b]]`` for a 2-D ``a``."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"take_columns: need (B, C) input and (B,) indices, got {a.shape} and {cols.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        return (full,)

    return _make(a.data[rows, cols].copy(), (a,), bw, "take_columns")


# ---------------------------------------------------------------------------
# fused network primitives
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``w`` (Cout, Cin, k, k)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3] or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, k, stride, ho, wo)  # (Cin*k*k, B*L)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols  # (Cout, B*L)
    if b is not None:
        b = _wrap(b)
        out += b.data.reshape(cout, 1)
    out = np.ascontiguousarray(out.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, bsz * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _kernels.col2im(wmat.T @ g2, bsz, cin, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, parents, bw, "conv2d")


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2."""
    x = _wrap(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2: need (B, C, H, W) with even H, W; got {x.shape}")
    out, idx = _kernels.maxpool2(x.data)
    h, w = x.shape[2], x.shape[3]
    return _make(out, (x,), lambda g: (_kernels.maxpool2_backward(g, idx, h, w),), "maxpool2")


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch-statistics normalization over every axis but 1.

    Returns ``(out, batch_mean, batch_biased_var)``; the two statistics are
    plain arrays for the running-average update.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    n = x.size // x.shape[1]
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.reshape(shape)
    out = xhat * g_ + beta.data.reshape(shape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm"), mu.reshape(-1), var.reshape(-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x - tmax(x, axis, keepdims=True).detach()
    return shifted - log(tsum(exp(shifted), axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    e = exp(x - tmax(x, axis, keepdims=True).detach())
    return e / tsum(e, axis, keepdims=True)


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------

def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``f`` at ``x`` (perturbs ``x.data`` in place, then restores it)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def _graph_nodes(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id not in seen:
            seen[node._id] = node
            stack.extend(node._parents)
    return list(seen.values())


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, indices=None, floor: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient.

    ``f`` maps ``x`` to a scalar tensor.  ``x`` may be a parameter that ``f``
    closes over; its data is perturbed in place.  Relative error per element
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x.requires_grad = True
    out = f(x)
    # other leaves in the graph may hold grads from earlier checks; park them
    leaves = [t for t in _graph_nodes(out) if t.is_leaf]
    saved = [t.grad for t in leaves]
    for t in leaves:
        t.grad = None
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)
    for t, g in zip(leaves, saved):
        t.grad = g
    if indices is not None:
        analytic = analytic[np.asarray(indices)]
    numeric = numerical_grad(f, x, eps, indices)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------
# layout: u32 count, then per tensor
#   u32 name length, UTF-8 name, u32 rank, u64 extents[rank], f64 LE values (row-major)

class FormatError(ValueError):
    pass


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(shape)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_tensors(fh)


def dumps_tensors(tensors: Mapping[str, np.ndarray | Tensor]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def loads_tensors(raw: bytes) -> dict[str, np.ndarray]:
    return read_tensors(io.BytesIO(raw))
