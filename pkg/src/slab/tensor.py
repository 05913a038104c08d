"""Dense float tensors with reverse-mode differentiation on an explicit tape.

Values are numpy arrays, float32 by default; the ``precision`` context
switches newly created tensors to float64 (gradient checks run there).
Operations record onto the innermost active ``Tape``; outside a tape they
run as plain numpy with no bookkeeping.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

# tanh-approximation GELU constants, shared with every oracle that re-derives it
GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715

_DTYPE = np.float32
_TAPES: list["Tape"] = []


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """A dense row-major float array plus autodiff bookkeeping.

    ``requires_grad`` marks leaves; intermediate results get it set when they
    are recorded on a tape. ``grad`` is populated (accumulated, never
    overwritten) by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all routes through the module-level ops
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

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one reverse sweep."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._nodes)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1]._nodes.append(_Node(inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep over ``tape`` seeding d(loss)/d(loss) = 1.

    Returns a dict mapping each leaf tensor (requires_grad, not produced on
    the tape) to its gradient array; the same arrays are accumulated into the
    leaves' ``.grad`` fields.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    produced = {id(n.out) for n in tape._nodes}
    if loss.requires_grad and id(loss) not in produced:
        raise ValueError("backward: loss tensor was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape._nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                acc = grads.get(id(inp))
                grads[id(inp)] = g if acc is None else acc + g
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g
                if inp not in leaf_grads:
                    leaf_grads[inp] = inp.grad
    return leaf_grads


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data, dtype=(a.data + b.data).dtype)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data, dtype=(a.data - b.data).dtype)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data, dtype=(a.data * b.data).dtype)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data / b.data, dtype=(a.data / b.data).dtype)

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(-a.data, dtype=a.data.dtype)
    return _record(out, (a,), lambda g: (-g,))


def pow_(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out = Tensor(a.data ** p, dtype=a.data.dtype)

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must have ndim >= 2")
    prod = a.data @ b.data
    out = Tensor(prod, dtype=prod.dtype)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.reshape(shape), dtype=a.data.dtype)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), dtype=a.data.dtype)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), bwd)


def take(a, key) -> Tensor:
    """Numpy-style indexing; gradients scatter-add back into the source."""
    a = _coerce(a)
    out = Tensor(a.data[key], dtype=a.data.dtype)
    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bwd(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _record(out, (a,), bwd)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.exp(a.data), dtype=a.data.dtype)
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.log(a.data), dtype=a.data.dtype)
    return _record(out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.tanh(a.data), dtype=a.data.dtype)
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, dtype=a.data.dtype)
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(C0*(x + C1*x^3)))."""
    a = _coerce(a)
    x = a.data
    u = GELU_C0 * (x + GELU_C1 * x ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t), dtype=a.data.dtype)

    def bwd(g):
        du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rejects non-finite input."""
    a = _coerce(a)
    if not np.isfinite(a.data).all():
        raise ValueError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, dtype=a.data.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, dtype=a.data.dtype)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    y = m + np.log(s)
    if not keepdims:
        y = np.squeeze(y, axis=axis)
    out = Tensor(y, dtype=a.data.dtype)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.exp(a.data - m) / s * g,)

    return _record(out, (a,), bwd)


def layer_norm(x, gain, bias, epsilon: float = 1e-12) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if x.data.shape[-1] == 0:
        raise ValueError("layer_norm: zero-length last axis")
    if epsilon <= 0:
        raise ValueError("layer_norm: epsilon must be positive")
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data, dtype=x.data.dtype)

    def bwd(g):
        dxhat = g * gain.data
        # standard layer-norm backward over the last axis
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.data.shape)
        gb = _unbroadcast(g, bias.data.shape)
        return dx, gg, gb

    return _record(out, (x, gain, bias), bwd)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; backward scatter-adds into the table."""
    weight = _coerce(weight)
    ids = np.asarray(ids)
    out = Tensor(weight.data[ids], dtype=weight.data.dtype)

    def bwd(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record(out, (weight,), bwd)


def gather_positions(x, batch_idx, seq_idx) -> Tensor:
    """Select rows ``x[b, s, :]`` for parallel index arrays -> [len(b), H]."""
    x = _coerce(x)
    bi = np.asarray(batch_idx, dtype=np.int64)
    si = np.asarray(seq_idx, dtype=np.int64)
    out = Tensor(x.data[bi, si], dtype=x.data.dtype)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (bi, si), g)
        return (full,)

    return _record(out, (x,), bwd)


def dropout(x, rate: float, seed: int) -> Tensor:
    """Inverted dropout with an explicit per-invocation seed."""
    x = _coerce(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale, dtype=x.data.dtype)
    return _record(out, (x,), lambda g: (g * keep * scale,))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    ``logits`` is [N, C]; ``labels`` an int array of length N.
    """
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError("cross_entropy: logits must be 2-D [N, C]")
    n = logits.data.shape[0]
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ValueError("cross_entropy: labels length must match logits rows")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = Tensor(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record(out, (logits,), bwd)


def multilabel_bce(logits, targets) -> Tensor:
    """Binary cross-entropy from logits: per-row sum over labels, mean over rows."""
    logits = _coerce(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if logits.data.shape != t.shape:
        raise ValueError(f"multilabel_bce: target shape {t.shape} != logits shape {logits.data.shape}")
    z = logits.data
    # stable: max(z,0) - z*t + log1p(exp(-|z|))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    rows = per.reshape(per.shape[0], -1).sum(axis=1) if per.ndim > 1 else per.reshape(1, -1).sum(axis=1)
    n = rows.shape[0]
    out = Tensor(rows.mean(), dtype=logits.data.dtype)

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return (g * (s - t) / n,)

    return _record(out, (logits,), bwd)
