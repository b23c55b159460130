"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a tensor that requires grad appends a node to the active
:class:`Tape`.  :func:`backward` walks that tape once in reverse, accumulates
leaf gradients additively into ``Tensor.grad`` and then clears the tape.

Broadcasting follows numpy, reduced back to the operand shape on the way
down.  Only first-order derivatives are supported.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyInputError, ShapeError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "active_tape",
    "backward",
    "zero_grads",
    "grad_check",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "mean_over_time",
    "mean",
    "tsum",
    "reshape",
    "transpose",
    "tanh",
    "gelu",
    "frame",
    "take",
    "concat",
    "bce_with_logits",
    "mse",
]


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class _State(threading.local):
    def __init__(self):
        self.stack = [Tape()]


_state = _State()


def active_tape() -> Tape:
    return _state.stack[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite value in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        # internal constructor: skips the copy; a NaN/Inf anywhere poisons the sum
        if not np.isfinite(arr.sum()):
            raise FloatingPointError("non-finite value produced by operation")
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _record(arr, parents, backward):
    out = Tensor._wrap(arr)
    if any(p.requires_grad for p in parents):
        tape = active_tape()
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, parents, backward))
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def power(a, k):
    ad = a.data
    return _record(ad ** k, (a,), lambda g: (g * k * ad ** (k - 1),))


def tanh(a):
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(y, (a,), bw)


# ---------------------------------------------------------------- reductions / shape

def tsum(a):
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis):
    shape = a.shape
    n = shape[axis]
    if n == 0:
        raise EmptyInputError(f"mean over empty axis {axis} of shape {shape}")

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record(a.data.mean(axis=axis), (a,), bw)


def mean_over_time(x):
    """Average a ``[..., T, D]`` block over its time axis."""
    if x.ndim < 2:
        raise ShapeError(f"mean_over_time expects [..., T, D], got {x.shape}")
    return mean(x, axis=-2)


def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, rows):
    """Rows of ``a`` along axis 0 (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _record(a.data[rows], (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def frame(x, width, hop):
    """Slice ``[..., L]`` into overlapping windows ``[..., T, width]``."""
    L = x.shape[-1]
    if L < width:
        raise ValidationError(f"signal length {L} shorter than frame width {width}")
    n = (L - width) // hop + 1
    idx = np.arange(n)[:, None] * hop + np.arange(width)[None, :]
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        # positions within one column of idx are distinct, so += is safe
        for j in range(width):
            out[..., idx[:, j]] += g[..., :, j]
        return (out,)

    return _record(x.data[..., idx], (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    if bd.ndim == 2:
        # weight matrix: fold leading axes so the weight gradient is one GEMM
        K, N = bd.shape
        a2 = ad.reshape(-1, K)

        def bw2(g):
            g2 = g.reshape(-1, N)
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

        return _record((a2 @ bd).reshape(ad.shape[:-1] + (N,)), (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def softmax_rows(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ValidationError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------- losses

def bce_with_logits(logit, label):
    """Mean binary cross-entropy of sigmoid(logit) against 0/1 labels."""
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)
    if logit.shape != y.shape:
        raise ShapeError(f"logit shape {logit.shape} vs label shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("labels must be exactly 0 or 1")
    z = logit.data
    n = max(z.size, 1)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = _sigmoid(z)
    return _record(np.asarray(per.mean()), (logit,), lambda g: (g * (sig - y) / n,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mse(a, b):
    """(1/B) * sum of squared row differences; rows are the first axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.shape[0] if a.ndim else 1
    return _record(np.asarray((diff * diff).sum() / n), (a, b),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf that requires grad and fed ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None or not _on_tape(tape, loss):
        raise ValidationError("loss was not produced on a live tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._tape is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.clear()


def _on_tape(tape, t):
    if tape.nodes and tape.nodes[-1].out is t:
        return True
    return any(n.out is t for n in tape.nodes)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The error on each coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValidationError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape():
        xt = Tensor(base, requires_grad=True)
        out = f(xt)
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with Tape() as tape:
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(base)).item()
            flat[i] = old - h
            fm = f(Tensor(base)).item()
            flat[i] = old
            num_flat[i] = (fp - fm) / (2 * h)
            tape.clear()
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def params_grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """grad_check over a set of parameter tensors that ``f`` closes over."""
    with Tape():
        for p in params:
            p.grad = None
            p.requires_grad = True
        backward(f())
    worst = 0.0
    with Tape() as tape:
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = f().item()
                flat[i] = old - h
                fm = f().item()
                flat[i] = old
                tape.clear()
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
