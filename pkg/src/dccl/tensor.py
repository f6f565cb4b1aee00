"""Dense float64 tensors with a tape for reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions.  The tape is the
DAG formed by those links; :func:`backward` walks it once in reverse
topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape (per thread)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A value node: forward output, parents on the tape, gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{tag}, shape={self.shape})"

    # operator sugar for composites
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str, trainable: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=trainable, name=name)


def _make(data, op: str, parents: tuple, backward_fn) -> Tensor:
    needs = _recording() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias-add: bias {b.shape} does not match trailing dim of {x.shape}")

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _make(x.data + b.data, "bias-add", (x, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("elementwise-mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "elementwise-mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concat: no inputs")
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs:
        if x.data.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), "concat", tuple(xs), bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop]."""
    if not 0 <= start <= stop <= x.shape[-1]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], "slice", (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose: needs >= 2 dims, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)
    return _make(out, "relu", (x,), lambda g: (np.where(pos, g, 0.0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (np.where(inside, g, 0.0),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  Masked-out slots get weight 0; a row
    with nothing unmasked yields all zeros."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs input {z.shape}")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


def gather(table: Tensor, idx) -> Tensor:
    """Embedding lookup: table[idx] with idx of any integer shape."""
    idx = np.asarray(idx)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding-gather: table must be 2-d, got {table.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx.min() if idx.min() < 0 else idx.max()
        raise IndexError(f"embedding-gather: index {int(bad)} out of range for table of size {n}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[idx], "embedding-gather", (table,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), "reduce-mean", (x,), lambda g: (np.full(x.shape, g / n),))


def sum_(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), "reduce-sum", (x,), lambda g: (np.full(x.shape, g, dtype=DTYPE),))


def sigmoid_xent(logits: Tensor, target) -> Tensor:
    """Elementwise -[t log σ(z) + (1-t) log(1-σ(z))], computed from logits.

    ``target`` may be soft (any value in [0, 1]); it is never differentiated.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    z = logits.data
    if t.shape != z.shape:
        raise ShapeError(f"sigmoid-xent: target {t.shape} vs logits {z.shape}")
    out = np.logaddexp(0.0, z) - t * z

    def bw(g):
        return (g * (_sigmoid(z) - t),)

    return _make(out, "sigmoid-xent", (logits,), bw)


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{name: gradient}`` for every named trainable leaf reached.
    Leaves that are frozen (``requires_grad=False``) get no entry.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            key = node.name if node.name is not None else f"tensor@{id(node)}"
            result[key] = node.grad
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return result


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update, in place on ``params`` (which is also returned).

    Parameters without a gradient entry are left alone.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"adam: gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam: grad {g.shape} vs param {params[k].shape} for {k!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in sorted(grads):
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_error: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """max|a-b| scaled by the larger of the two tensors' max magnitudes."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               h: float = 1e-5, max_params: int = 10_000) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` builds a scalar loss from a dict of trainable tensors.
    """
    total = sum(p.size for p in params.values())
    if total > max_params:
        raise ValueError(f"grad_check: {total} parameters exceeds limit {max_params}")
    leaves = {k: param(v, k) for k, v in params.items()}
    analytic = backward(loss_fn(leaves))

    def f(vals):
        with no_grad():
            return float(loss_fn({k: Tensor(v) for k, v in vals.items()}).data)

    per = {}
    for k, v in params.items():
        num = np.zeros_like(v, dtype=DTYPE)
        work = {kk: np.array(vv, dtype=DTYPE) for kk, vv in params.items()}
        flat = work[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
        per[k] = rel_error(analytic.get(k, np.zeros_like(num)), num)
    return GradCheckReport(per, max(per.values(), default=0.0), total)


def forward_op(kind: str, inputs: Sequence[Tensor], **kw) -> Tensor:
    """Dispatch by op-kind name."""
    table: dict[str, Callable] = {
        "matmul": matmul,
        "add": add,
        "sub": sub,
        "bias-add": bias_add,
        "concat": lambda *xs: concat(xs, **kw),
        "tanh": tanh,
        "relu": relu,
        "sigmoid": sigmoid,
        "softmax": lambda x: softmax(x, **kw),
        "embedding-gather": lambda t: gather(t, kw["idx"]),
        "reduce-mean": mean,
        "reduce-sum": sum_,
        "scale": lambda x: scale(x, kw["c"]),
        "elementwise-mul": mul,
        "log": log,
        "clip": lambda x: clip(x, kw["lo"], kw["hi"]),
        "reshape": lambda x: reshape(x, kw["shape"]),
        "transpose": transpose,
        "slice": lambda x: slice_last(x, kw["start"], kw["stop"]),
        "sigmoid-xent": lambda z: sigmoid_xent(z, kw["target"]),
    }
    if kind not in table:
        raise ValueError(f"unknown op kind {kind!r}")
    return table[kind](*inputs)


OP_KINDS = ("matmul", "add", "sub", "bias-add", "concat", "tanh", "relu", "sigmoid", "softmax",
            "embedding-gather", "reduce-mean", "reduce-sum", "scale", "elementwise-mul", "log",
            "clip", "reshape", "transpose", "slice", "sigmoid-xent")


def tensor_hash(arrays: dict[str, np.ndarray] | Iterable[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    items = sorted(arrays.items()) if isinstance(arrays, dict) else enumerate(arrays)
    for k, a in items:
        h.update(str(k).encode())
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
