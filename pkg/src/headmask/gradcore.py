"""Tape-style reverse-mode autodiff over float64 numpy arrays.

Every op records a node holding its inputs and a backward closure. ``backward``
walks the nodes reachable from a scalar loss in reverse creation order and
accumulates gradients into leaves that have ``requires_grad`` set. Nothing is
recorded when no input requires a gradient, or inside ``no_grad()``.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels

LAYERNORM_EPS = 1e-5

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class BackwardError(RuntimeError):
    """``backward`` called on a non-scalar or an already consumed graph."""


class EmptyLossError(ValueError):
    """Every position of a cross-entropy call was masked out."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_counter)
    out._consumed = False
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", bw)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    # in-place arithmetic keeps the number of large temporaries down
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= c
    np.tanh(t, out=t)
    data = t + 1.0
    data *= xd
    data *= 0.5

    def bw(g):
        local = x2 * (3 * 0.044715)
        local += 1.0
        local *= c
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        local *= sech2
        local *= xd
        local += t
        local += 1.0
        local *= 0.5
        local *= g
        x._accumulate(local)

    return _make(data, (x,), "gelu", bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.array(x.data.sum()), (x,), "sum", bw)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(x.data.sum(axis=axis), (x,), "sum_axis", bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    def bw(g):
        x._accumulate(np.swapaxes(g, a1, a2))

    return _make(np.swapaxes(x.data, a1, a2), (x,), "swapaxes", bw)


def index(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(np.array(x.data[idx], copy=True), (x,), "index", bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatters into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(table.data[ids], (table,), "embedding", bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes.

    A 2-D right operand is applied as one large GEMM over the flattened
    leading axes of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        try:
            data = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(f"matmul: {a.shape} x {b.shape}") from exc

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), "matmul", bw)


# ---------------------------------------------------------------------------
# normalisation / probabilities
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), "softmax", bw)


def causal_softmax(x: Tensor) -> Tensor:
    """Row softmax over the last two axes where row i only sees columns <= i.

    Hidden entries are exactly zero and receive no gradient.
    """
    lead = x.shape[:-2]
    l, k = x.shape[-2:]
    flat = np.ascontiguousarray(x.data.reshape(-1, l, k))
    p = kernels.causal_softmax_forward(flat)

    def bw(g):
        gflat = np.ascontiguousarray(g.reshape(-1, l, k))
        x._accumulate(kernels.causal_softmax_backward(p, gflat).reshape(x.shape))

    return _make(p.reshape(*lead, l, k), (x,), "causal_softmax", bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layernorm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(data, (x, gain, bias), "layernorm", bw)


def cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits`` has shape (..., V); ``targets`` and ``loss_mask`` match the
    leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or loss_mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    count = int(loss_mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is masked")
    sel = targets[loss_mask]
    if sel.size and (sel.min() < 0 or sel.max() >= V):
        raise IndexError("cross_entropy: target id out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    safe_t = np.where(loss_mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * loss_mask).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        logits._accumulate(g * (p - onehot) * (loss_mask[..., None] / count))

    return _make(np.array(loss), (logits,), "cross_entropy", bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf feeding ``loss``.

    A graph can be walked once; closures are dropped afterwards.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise BackwardError(f"backward needs a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("backward already ran on this graph")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor requiring grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes or t._backward is None:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)

    # interior gradients live on the tensors during the walk
    loss.grad = np.ones_like(loss.data)
    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        if t.grad is not None:
            t._backward(t.grad)
        if t is not loss:
            t.grad = None
        t._backward = None
        t._parents = ()
        t._consumed = True
    loss._consumed = True
