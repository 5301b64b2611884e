"""Small reverse-mode autodiff engine on top of numpy.

Every op returns a :class:`Tensor`. When any input requires a gradient the
output records its parents and a closure that maps the output gradient to
input gradients; :meth:`Tensor.backward` replays those closures in reverse
topological order. Only leaves (and tensors marked with ``retain_grad``) keep
their ``.grad`` after the pass.

Precision is a module-level switch: float32 for training, float64 for
finite-difference checks.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_STATE = threading.local()

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def get_dtype():
    return _DTYPE


def set_precision(name: str) -> None:
    """Select ``"float32"`` or ``"float64"`` for newly created tensors."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name).type


@contextlib.contextmanager
def precision(name: str):
    old = _DTYPE
    set_precision(name)
    try:
        yield
    finally:
        set_precision(np.dtype(old).name)


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    old = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = old


class Tensor:
    """Dense array with an optional gradient buffer and tape node.

    The tape node is the triple ``(op, _parents, _backward)``; ``_backward``
    takes the output gradient and returns one gradient (or ``None``) per
    parent.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node.is_leaf:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


NdArray = Tensor


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
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


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


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (x,), backward, "gelu")


# -- reductions / shape -------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx, unique: bool = False) -> Tensor:
    """``a[idx]``; pass ``unique=True`` when advanced indices never repeat."""
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced and not unique:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(out, (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    fold = a.ndim > 2 and b.ndim == 2
    if fold:
        # shared weight: one 2-D GEMM over all leading rows
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        ad, bd = a.data, b.data
        if fold:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(a.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape) if bd.ndim > 1 else np.multiply.outer(g, bd)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation / probabilities -------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


def _scatter_rows(ids: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` into an (n, d) zero matrix at ``ids`` (sorted segment sums; faster than add.at)."""
    full = np.zeros((n, rows.shape[1]), dtype=rows.dtype)
    if ids.size == 0:
        return full
    order = np.argsort(ids, kind="stable")
    sids = ids[order]
    starts = np.flatnonzero(np.r_[True, sids[1:] != sids[:-1]])
    full[sids[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return full


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        return (_scatter_rows(ids.reshape(-1), g.reshape(-1, table.shape[1]), table.shape[0]),)

    return _make(out, (table,), backward, "embedding")


def cross_entropy_logits(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored rows.

    ``logits`` has shape (..., V) and ``targets`` the leading shape. The
    returned tensor carries ``n_valid`` and ``empty``; an all-ignored input
    gives a zero loss with ``empty=True``.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    flat_t = targets.reshape(-1)
    valid = flat_t != ignore_index
    bad = flat_t[valid]
    if bad.size and (bad.min() < 0 or bad.max() >= vocab):
        raise IndexError(f"target index out of vocabulary range [0, {vocab})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        out = Tensor(np.zeros((), dtype=_DTYPE))
        out.n_valid, out.empty = 0, True
        return out

    flat = logits.data.reshape(-1, vocab)
    rows = np.nonzero(valid)[0]
    sel = flat[rows]
    m = sel.max(axis=-1, keepdims=True)
    e = np.exp(sel - m)
    z = e.sum(axis=-1, keepdims=True)
    tgt = flat_t[rows]
    nll = (np.log(z[:, 0]) + m[:, 0]) - sel[np.arange(len(rows)), tgt]
    loss = nll.mean()

    def backward(g):
        p = e / z
        p[np.arange(len(rows)), tgt] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = p * (g / n_valid)
        return (full.reshape(logits.shape),)

    out = _make(np.asarray(loss, dtype=_DTYPE), (logits,), backward, "cross_entropy")
    out.n_valid, out.empty = n_valid, False
    return out


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamWState":
        st = cls(**kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState, lr: float) -> None:
    """One AdamW update in place.

    Decay is decoupled and multiplicative (``p *= 1 - lr*wd``) and applied
    before the bias-corrected adaptive step. Non-finite gradients reject the
    whole step without touching parameters or moments.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if g is not None:
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; AdamW step rejected")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if state.weight_decay:
            p.data *= (1.0 - lr * state.weight_decay)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "warmup-cosine"
    peak_lr: float = 3e-4
    total_steps: int = 1000
    warmup_ratio: float = 0.1

    def __post_init__(self):
        if self.kind not in ("warmup-cosine", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.peak_lr
    w = schedule.warmup_steps
    if step < w:
        return schedule.peak_lr * step / w
    span = schedule.total_steps - w
    if span <= 0:
        return schedule.peak_lr
    progress = (step - w) / span
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
