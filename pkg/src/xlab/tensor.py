"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op appends a node to the active :class:`Tape`.
``backward(loss)`` replays that tape in reverse, accumulating gradients into
leaf tensors, then releases the tape so it cannot be replayed twice.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward was requested on a tape that cannot be replayed."""


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed ops.

    Use as a context manager to scope a forward pass; outside any explicit
    scope a per-thread default tape is used and replaced after each backward.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev: Optional[Tape] = None

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """An n-dimensional array that may take part in differentiation.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer that ``backward`` adds into; callers zero it between steps.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._tape: Optional[Tape] = None
        self.retains_grad = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self.retains_grad = True
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def record_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. Nothing is recorded when no parent requires a gradient.
    """
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if needs:
        tape = current_tape()
        out.requires_grad = True
        out.grad = None
        out._tape = tape
        tape.record(_Node(out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced by a recorded op")
    if tape.consumed:
        raise TapeError("tape already replayed; re-run the forward pass before calling backward again")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.retains_grad:
            node.out.grad = g.copy()
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    tape.clear()
    tape.consumed = True


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record_op(ad * bd, (a, b), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return record_op(out, (x,), bw)


# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return record_op(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record_op(a.data[index], (a,), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules.

    Backward: dA = dC·Bᵀ and dB = Aᵀ·dC, summed over broadcast batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        if bd.ndim == 2 and ad.ndim > 2:
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
        else:
            out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # shared weight: fold batch axes into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record_op(out, (a, b), bw)


def scaled_softmax_rows(
    logits: Tensor,
    scale: float,
    mask: Optional[np.ndarray] = None,
    bias: Optional[np.ndarray] = None,
) -> Tensor:
    """Row softmax of ``logits / scale + bias`` over the last axis.

    ``mask`` is a boolean array broadcastable to ``logits``; False entries are
    excluded and come out as exactly 0. ``bias`` is a constant (no gradient)
    added after scaling.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    z = logits.data / scale
    if bias is not None:
        z = z + bias.astype(z.dtype, copy=False)
    if mask is None:
        zmax = z.max(axis=-1, keepdims=True)
        e = np.exp(z - zmax)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row is fully masked: no attendable position")
        zmax = np.where(mask, z, -np.inf).max(axis=-1, keepdims=True)
        e = np.exp(np.where(mask, z - zmax, 0.0)) * mask
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (gz / scale,)

    return record_op(p, (logits,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layernorm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm affine shapes {gain.shape}, {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return record_op(out, (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    v = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= v))
    if len(bad):
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(f"token id {int(ids[pos])} at position {pos} outside vocabulary of size {v}")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return record_op(table.data[ids], (table,), bw)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over all leading positions."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("cross_entropy needs at least one target")
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    v = logits.shape[-1]
    if (targets < 0).any() or (targets >= v).any():
        raise IndexError(f"target outside vocabulary of size {v}")
    logp = log_softmax(logits.data)
    flat = logp.reshape(-1, v)
    tflat = targets.reshape(-1)
    n = tflat.size
    loss = -flat[np.arange(n), tflat].mean()

    def bw(g):
        grad = np.exp(flat)
        grad[np.arange(n), tflat] -= 1.0
        return ((grad * (g / n)).reshape(logits.shape),)

    return record_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
