"""Dense arrays with reverse-mode automatic differentiation.

Every operation records a closure that maps the output gradient to input
gradients.  The graph is rebuilt on each forward pass and released by
``backward``; calling ``backward`` twice on the same graph is an error.

Precision is float32 by default.  Verification code switches to float64 with
``precision(np.float64)`` and may turn on ``check_finite()`` so that every op
output is scanned for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class DegenerateDistributionError(NumericError):
    pass


class GraphError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.check_finite = False
        self.counters: list[MacCounter] = []
        self.scope = "other"


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. float64 for gradient checks)."""
    old = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    old = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = old


class MacCounter:
    """Multiply-accumulate counts bucketed by the active ``mac_scope``."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = {}

    def add(self, scope: str, n: int) -> None:
        self.counts[scope] = self.counts.get(scope, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, scope: str) -> int:
        return self.counts.get(scope, 0)


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


@contextlib.contextmanager
def mac_scope(name: str):
    old = _state.scope
    _state.scope = name
    try:
        yield
    finally:
        _state.scope = old


def _count(n: int) -> None:
    for c in _state.counters:
        c.add(_state.scope, n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _state.dtype:
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False

    # -- introspection -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{rg})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        if self._freed:
            raise GraphError("graph already released by an earlier backward()")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            if g is not None:
                for p, gp in zip(node._parents, node._backward(g)):
                    if gp is None or not p.requires_grad:
                        continue
                    k = id(p)
                    grads[k] = grads[k] + gp if k in grads else gp
            node._backward = None
            node._parents = ()
            node._freed = True

    # -- operator sugar -----------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        if node._freed:
            raise GraphError(f"use of a released graph node ({node._op}) in backward()")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _state.check_finite and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._freed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} only broadcast over leading batch axes or scalars")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), (-_unbroadcast(g, sb) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _node(a.data ** p, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g):
        return (g * s * (1 + a.data * (1 - s)),)

    return _node(out, (a,), backward, "silu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and avoids boolean-mask gathers
    out = np.tanh(x * 0.5)
    out += 1.0
    out *= 0.5
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(np.array(a.data[idx]), (a,), backward, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, backward, "stack")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def backward(g):
        gw = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(gw, ids.ravel(), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _node(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes must agree, or one operand may be a plain 2-D matrix that is
    shared across the other's leading batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _count(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if la or not lb:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2)).sum(axis=tuple(range(len(lb))))
        if b.requires_grad:
            if lb:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            else:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# distributions


def _stable_softmax(x: np.ndarray, axis: int, inplace: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateDistributionError("softmax over a slice whose entries are all -inf")
    e = np.subtract(x, m, out=x if inplace else None)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = _stable_softmax(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateDistributionError("log_softmax over a slice whose entries are all -inf")
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def token_log_probs(logits, targets) -> Tensor:
    """log softmax(logits)[..., target] for every leading position.

    ``logits`` has shape [..., V] and ``targets`` the matching leading shape.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(x, targets[..., None], axis=-1)
    out = (picked - m - np.log(z))[..., 0]

    def backward(g):
        gl = -(e / z) * g[..., None]
        np.put_along_axis(gl, targets[..., None],
                          np.take_along_axis(gl, targets[..., None], axis=-1) + g[..., None], axis=-1)
        return (gl,)

    return _node(out, (logits,), backward, "token_log_probs")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood in nats of ``targets`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    return -token_log_probs(logits, targets).mean()


# ---------------------------------------------------------------------------
# fused transformer kernels


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm gain {gain.shape} vs input {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data * r

    def backward(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * n).reshape(-1, n.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gy = g * gain.data
            gx = r * (gy - n * (gy * n).mean(axis=-1, keepdims=True))
        return gx, gg

    return _node(n * gain.data, (x, gain), backward, "rmsnorm")


def rope_tables(positions, head_dim: int, base: float = 10000.0, dtype=None):
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {head_dim}")
    dtype = dtype or _state.dtype
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotate coordinate pairs (2i, 2i+1) by ``pos * base**(-2i/d)``.

    ``x`` has shape [..., T, head_dim]; ``positions`` has length T.
    """
    x = as_tensor(x)
    cos, sin = rope_tables(positions, x.shape[-1], base, x.dtype)
    if cos.shape[0] != x.shape[-2]:
        raise ShapeError(f"{cos.shape[0]} positions for {x.shape[-2]} rows")
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _node(out, (x,), backward, "rope")


def window_mask(T: int, window: int) -> np.ndarray:
    """Boolean [T, T] mask: query i may see keys j with i - window < j <= i."""
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    return (j <= i) & (j > i - window)


def _band_mask(nb: int, w: int) -> np.ndarray:
    # query row r of block b sees local key column c (absolute j = (b-1)w + c)
    # iff r < c <= r + w; block 0 has no keys before position 0
    r = np.arange(w)[:, None]
    c = np.arange(2 * w)[None, :]
    base = (c > r) & (c <= r + w)
    mask = np.broadcast_to(base, (nb, w, 2 * w)).copy()
    mask[0, :, :w] = False
    return mask


def _mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, -np.inf).astype(dtype)


def window_attention(q, k, v, window: int, scale: float | None = None) -> Tensor:
    """Causal sliding-window attention over [..., T, d] queries/keys/values.

    Uses a dense masked product, tiled into blocks of ``window`` queries when
    the sequence is longer than two windows.  MACs are counted from the mask
    (attended pairs only).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if window < 1:
        raise ValueError("window must be >= 1")
    T, d = q.shape[-2:]
    lead = q.shape[:-2]
    nlead = int(np.prod(lead, dtype=np.int64))
    scale = d ** -0.5 if scale is None else scale
    if T <= 2 * window:
        return _dense_window_attention(q, k, v, window, scale, nlead)

    w = window
    nb = -(-T // w)
    Tp = nb * w
    pad = [(0, 0)] * len(lead)

    def blocks(a):
        ap = np.pad(a, pad + [(w, Tp - T), (0, 0)]).reshape(*lead, nb + 1, w, d)
        return np.concatenate([ap[..., :-1, :, :], ap[..., 1:, :, :]], axis=-2)

    qb = np.pad(q.data, pad + [(0, Tp - T), (0, 0)]).reshape(*lead, nb, w, d)
    kb, vb = blocks(k.data), blocks(v.data)
    mask = _band_mask(nb, w)
    valid_q = (np.arange(Tp) < T).reshape(nb, w, 1)
    _count(2 * nlead * int((mask & valid_q).sum()) * d)

    s = np.matmul(qb, np.swapaxes(kb, -1, -2))
    s *= scale
    s += _mask_bias(mask, s.dtype)
    p = _stable_softmax(s, -1, inplace=True)
    out = np.matmul(p, vb).reshape(*lead, Tp, d)[..., :T, :]

    def unblock(gb):
        gp = np.zeros((*lead, nb + 1, w, d), dtype=gb.dtype)
        gp[..., :-1, :, :] += gb[..., :w, :]
        gp[..., 1:, :, :] += gb[..., w:, :]
        return gp.reshape(*lead, Tp + w, d)[..., w:w + T, :]

    def backward(g):
        gb = np.pad(g, pad + [(0, Tp - T), (0, 0)]).reshape(*lead, nb, w, d)
        gpr = np.matmul(gb, np.swapaxes(vb, -1, -2))
        gs = gpr - (gpr * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= scale
        gq = gk = gv = None
        if q.requires_grad:
            gq = np.matmul(gs, kb).reshape(*lead, Tp, d)[..., :T, :]
        if k.requires_grad:
            gk = unblock(np.matmul(np.swapaxes(gs, -1, -2), qb))
        if v.requires_grad:
            gv = unblock(np.matmul(np.swapaxes(p, -1, -2), gb))
        return gq, gk, gv

    return _node(np.ascontiguousarray(out), (q, k, v), backward, "window_attention")


def _dense_window_attention(q, k, v, window, scale, nlead):
    T, d = q.shape[-2:]
    mask = window_mask(T, window)
    _count(2 * nlead * int(mask.sum()) * d)
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    s *= scale
    s += _mask_bias(mask, s.dtype)
    p = _stable_softmax(s, -1, inplace=True)
    out = np.matmul(p, v.data)

    def backward(g):
        gpr = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = gpr - (gpr * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= scale
        gq = np.matmul(gs, k.data) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) if k.requires_grad else None
        gv = np.matmul(np.swapaxes(p, -1, -2), g) if v.requires_grad else None
        return gq, gk, gv

    return _node(out, (q, k, v), backward, "window_attention")


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               coords: Iterable[tuple] | None = None) -> float:
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``.

    Relative error per coordinate is |a - b| / max(|a|, |b|, 1e-8).  ``coords``
    restricts the comparison to a subset of flat indices.  Run under
    ``precision(np.float64)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=_state.dtype)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise GraphError("grad_check needs a scalar function")
    if not out.is_finite():
        raise NumericError("grad_check: non-finite function value")
    if out.requires_grad:
        out.backward()
    auto = xt.grad if xt.grad is not None else np.zeros_like(x0)
    flat_idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for fi in flat_idx:
        xp = x0.copy().reshape(-1)
        xp[fi] += eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        xp[fi] -= 2 * eps
        fm = f(Tensor(xp.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite value perturbing coordinate {fi}")
        num = (fp - fm) / (2 * eps)
        a = float(auto.reshape(-1)[fi])
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
