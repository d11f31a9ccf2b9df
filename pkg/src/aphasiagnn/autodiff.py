"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Every tensor wraps a float64 numpy array. Differentiable primitives build a
dynamic graph through ``Tensor._parents``; :func:`backward` walks it in
reverse topological order and accumulates gradients into the ``grad`` buffer
of leaf tensors that require them.

Broadcasting is restricted to leading batch dimensions: two operands must
either have identical shapes, or the shape of one must be a suffix of the
other's (e.g. ``[B, n, d] + [d]``). Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(ValueError):
    """Raised on NaN/Inf where a finite value is required."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: "Tensor"
    replay: Callable


@dataclass
class ComputationTape:
    """Ordered record of primitive operations.

    Used as a context manager; while active, every primitive appends an
    :class:`OpRecord`. Records are appended after their inputs exist, so the
    list is always in topological order.
    """

    records: list = field(default_factory=list)
    _token: object = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.records)

    def replay(self) -> list:
        """Re-run every recorded op from the current data of the tape's leaves.

        Returns the recomputed output arrays, one per record.
        """
        values: dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            args = [values.get(id(t), t.data) for t in rec.inputs]
            out = rec.replay(*args)
            values[id(rec.output)] = out
            outs.append(out)
        return outs


_ACTIVE_TAPE: contextvars.ContextVar[Optional[ComputationTape]] = contextvars.ContextVar(
    "aphasiagnn_tape", default=None
)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=DTYPE))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward, replay) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.records.append(OpRecord(op, tuple(parents), out, replay))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb, detail="only leading-batch broadcasting is allowed")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    # matmul may broadcast size-1 batch dims
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), bw, np.add)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make("sub", a.data - b.data, (a, b), bw, np.subtract)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), bw, np.multiply)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), bw, lambda x: x * c)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("add_scalar", a.data + c, (a,), lambda g: (g,), lambda x: x + c)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` (a constant boolean array) else ``b``.

    ``cond`` may be any shape numpy-broadcastable to ``a``; ``a`` and ``b``
    must have identical shapes (a python scalar is allowed for ``b``).
    """
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.full(a.shape, float(b)))
    if a.shape != b.shape:
        raise ShapeError("where", a.shape, b.shape)
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)

    def bw(g):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)

    return _make("where", np.where(cond, a.data, b.data), (a, b), bw,
                 lambda x, y: np.where(cond, x, y))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        n = min(len(la), len(lb))
        if la[len(la) - n:] != lb[len(lb) - n:]:
            raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), bw, np.matmul)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape, detail="need at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make("transpose", np.transpose(a.data, axes), (a,), bw,
                 lambda x: np.transpose(x, axes))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None

    def bw(g):
        return (g.reshape(src),)

    return _make("reshape", out, (a,), bw, lambda x: x.reshape(shape))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand size-1 or missing leading axes (numpy rules); grads are summed back."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None

    def bw(g):
        lead = g.ndim - len(src)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", out, (a,), bw, lambda x: np.broadcast_to(x, shape).copy())


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty tensor list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw,
                 lambda *xs: np.concatenate(xs, axis=ax))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError("stack", ref, t.shape)
    ax = axis % (len(ref) + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make("stack", np.stack([t.data for t in tensors], axis=ax), tensors, bw,
                 lambda *xs: np.stack(xs, axis=ax))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatter-adds."""
    src = a.shape
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.array(out, dtype=DTYPE)
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", out, (a,), bw, lambda x: x[idx])


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) or
               isinstance(i, np.integer) for i in items)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, ad, 0.0), (a,), bw, lambda x: np.where(x > 0, x, 0.0))


def _sigmoid_np(x):
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", s, (a,), bw, _sigmoid_np)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make("tanh", t, (a,), bw, np.tanh)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,), np.exp)


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NumericError("log: non-positive input")
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,), np.log)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, nd):
    if axis is None:
        return tuple(range(nd))
    if isinstance(axis, int):
        return (axis % nd,)
    return tuple(a % nd for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    src = a.shape

    def bw(g):
        return (np.array(_expand(g, src, axes, keepdims)),)

    fwd = lambda x: np.sum(x, axis=axes, keepdims=keepdims)  # noqa: E731
    return _make("sum", np.asarray(fwd(a.data), dtype=DTYPE), (a,), bw, fwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    count = float(np.prod([src[i] for i in axes])) if axes else 1.0

    def bw(g):
        return (np.array(_expand(g, src, axes, keepdims)) / count,)

    fwd = lambda x: np.mean(x, axis=axes, keepdims=keepdims)  # noqa: E731
    return _make("mean", np.asarray(fwd(a.data), dtype=DTYPE), (a,), bw, fwd)


def _extreme(op, a: Tensor, axis, keepdims, fn):
    axes = _norm_axis(axis, a.ndim)
    ad = a.data
    full = fn(ad, axis=axes, keepdims=True)
    # ties share the gradient equally
    hit = ad == full
    count = hit.sum(axis=axes, keepdims=True)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (hit * (gk / count),)

    out = full if keepdims else np.squeeze(full, axis=axes)
    return _make(op, np.asarray(out, dtype=DTYPE), (a,), bw,
                 lambda x: fn(x, axis=axes, keepdims=keepdims))


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme("max", a, axis, keepdims, np.max)


def reduce_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme("min", a, axis, keepdims, np.min)


# ---------------------------------------------------------------------------
# composite primitives with fused backward rules
# ---------------------------------------------------------------------------


def _softmax_np(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if a.shape[axis] == 0:
        raise ShapeError("softmax", a.shape, detail="empty axis")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: input contains NaN or Inf")
    s = _softmax_np(a.data, axis)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), bw, lambda x: _softmax_np(x, axis))


def _log_softmax_np(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, n_classes: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape, detail="logits must be [b, classes]")
    labels = np.asarray(labels)
    b, c = logits.shape
    if b < 1:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (b,):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n_classes = c if n_classes is None else n_classes
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"cross_entropy: labels must be integers in [0, {n_classes})")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy: logits contain NaN or Inf")
    rows = np.arange(b)

    def fwd(x):
        return np.asarray(-np.mean(_log_softmax_np(x)[rows, labels]), dtype=DTYPE)

    p = np.exp(_log_softmax_np(logits.data))

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _make("cross_entropy", fwd(logits.data), (logits,), bw, fwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def fwd(xx, gg, bb):
        m = xx.mean(axis=-1, keepdims=True)
        c = xx - m
        v = (c * c).mean(axis=-1, keepdims=True)
        return c / np.sqrt(v + eps) * gg + bb

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw, fwd)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None,
            seed: Optional[int] = None) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng(seed)
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep

    return _make("dropout", x.data * mask, (x,), lambda g: (g * mask,), lambda v: v * mask)


def lstm_cell(gates: Tensor, c_prev: Tensor) -> Tensor:
    """One LSTM step from pre-activation ``gates`` = [i, f, g, o] blocks.

    Returns ``[h, c]`` concatenated on the last axis.
    """
    H = c_prev.shape[-1]
    if gates.shape[-1] != 4 * H or gates.shape[:-1] != c_prev.shape[:-1]:
        raise ShapeError("lstm_cell", gates.shape, c_prev.shape)

    def fwd(gt, cp):
        i = _sigmoid_np(gt[..., :H])
        f = _sigmoid_np(gt[..., H:2 * H])
        gg = np.tanh(gt[..., 2 * H:3 * H])
        o = _sigmoid_np(gt[..., 3 * H:])
        c = f * cp + i * gg
        return np.concatenate([o * np.tanh(c), c], axis=-1)

    gd, cpd = gates.data, c_prev.data
    i = _sigmoid_np(gd[..., :H])
    f = _sigmoid_np(gd[..., H:2 * H])
    gg = np.tanh(gd[..., 2 * H:3 * H])
    o = _sigmoid_np(gd[..., 3 * H:])
    c = f * cpd + i * gg
    tc = np.tanh(c)
    out = np.concatenate([o * tc, c], axis=-1)

    def bw(gout):
        dh, dc_out = gout[..., :H], gout[..., H:]
        do = dh * tc
        dc = dc_out + dh * o * (1.0 - tc * tc)
        di = dc * gg
        df = dc * cpd
        dg = dc * i
        dgates = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - gg * gg), do * o * (1.0 - o)],
            axis=-1)
        return dgates, dc * f

    return _make("lstm_cell", out, (gates, c_prev), bw, fwd)


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients are added into ``.grad`` of every leaf that requires grad;
    callers zero them explicitly between steps.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad or gp is None:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = np.array(gp, dtype=DTYPE)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: Optional[Sequence[int]] = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor. ``x.data`` is perturbed in place and
    restored. ``coords`` optionally restricts the check to flat indices.
    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must be in [1e-7, 1e-3], got {eps}")
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    prev_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise ShapeError("grad_check", out.shape, detail="f must be scalar-valued")
        backward(out)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        idxs = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            fp = f(x).item()
            flat[i] = lo
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (hi - lo)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = was
        x.grad = prev_grad
