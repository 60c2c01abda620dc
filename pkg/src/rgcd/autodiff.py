"""Dense float64 reverse-mode autodiff.

Graphs are built by running ordinary Python code on :class:`Tensor` values
(define-by-run).  Every op records its parents and a closure that maps the
output gradient to parent gradients; node creation order is a valid
topological order.  ``detach`` cuts the graph: its output is a fresh leaf.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ParamSet",
    "AdamState",
    "no_grad",
    "as_tensor",
    "add", "sub", "neg", "mul", "div", "matmul", "affine",
    "tanh", "silu", "sum", "mean", "square", "sqrt", "exp", "log",
    "softmax", "logsumexp", "concat", "slice_", "reshape", "detach",
    "forward_eval", "backward", "grad_check", "adam_step", "adam_init",
]

_GRAD_ENABLED = True
_NODE_IDS = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"shape mismatch in node '{op}': " + ", ".join(str(s) for s in shapes))


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph edges."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._id = next(_NODE_IDS)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def backward(self):
        _run_backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", x.shape, w.shape, b.shape)

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ w.data + b.data, (x, w, b), bw, "affine")


# -- elementwise unary -------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def bw(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return _make(out, (a,), bw, "silu")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# -- reductions --------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / count,), "mean")


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _make(out, (a,), bw, "logsumexp")


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    s = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = s / s.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -- structure ---------------------------------------------------------------

def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tuple(ts), bw, "concat")


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw, "slice")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


class _DetachReplay:
    """Record detach outputs on one pass and replay them on later passes."""

    def __init__(self):
        self.values = []
        self.replaying = False
        self.pos = 0

    def __call__(self, value):
        if not self.replaying:
            self.values.append(value.copy())
            return value
        out = self.values[self.pos]
        self.pos += 1
        return out


_DETACH_HOOK = None


def detach(a) -> Tensor:
    """Identity in value; contributes exactly zero gradient."""
    a = as_tensor(a)
    data = a.data if _DETACH_HOOK is None else _DETACH_HOOK(a.data)
    return Tensor(data.copy(), op="detach")


# -- backward ----------------------------------------------------------------

def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))
    return order


def _run_backward(out: Tensor):
    if out.data.size != 1:
        raise ShapeError("backward: output must be scalar", out.shape)
    if not out.requires_grad:
        return
    grads = {out._id: np.ones_like(out.data)}
    for node in reversed(_topo(out)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            grads[p._id] = pg if p._id not in grads else grads[p._id] + pg


# -- parameter sets and graph-level helpers ----------------------------------

class ParamSet(dict):
    """Name -> float64 array, insertion ordered; shapes are fixed once set."""

    def __setitem__(self, key, value):
        value = np.asarray(value, dtype=np.float64)
        if key in self and self[key].shape != value.shape:
            raise ShapeError(f"param '{key}'", self[key].shape, value.shape)
        super().__setitem__(key, value)

    def __init__(self, items=(), **kw):
        super().__init__()
        for k, v in dict(items, **kw).items():
            self[k] = v

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    def leaves(self, requires_grad=True) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.items()}

    def constants(self) -> dict:
        return {k: Tensor(v) for k, v in self.items()}


Graph = Callable[[Mapping[str, Tensor]], Tensor]


def forward_eval(graph: Graph, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Value of ``graph`` at ``inputs``; no graph is recorded."""
    with no_grad():
        out = graph({k: Tensor(v) for k, v in inputs.items()})
    return as_tensor(out).data.copy()


def value_and_grad(graph: Graph, inputs: Mapping[str, np.ndarray]):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = graph(leaves)
    if out.data.size != 1:
        raise ShapeError("backward: output must be scalar", out.shape)
    out.backward()
    grads = ParamSet(
        (k, t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()
    )
    return float(out.data), grads


def backward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> ParamSet:
    """Gradient of a scalar ``graph`` w.r.t. every entry of ``inputs``."""
    return value_and_grad(graph, inputs)[1]


def grad_check(graph: Graph, inputs: Mapping[str, np.ndarray], fd_step: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    The error of one entry is ``|an - fd| / max(floor, |an| + |fd|)``.  Central
    differences carry roundoff of roughly ``eps * |f| / fd_step`` (about 1e-10 at
    the default step), so for entries whose true gradient is near zero only a
    larger ``floor`` makes the ratio meaningful.

    Detached sub-expressions are frozen at their unperturbed values while the
    finite differences are taken, so the oracle honours the stop-gradient.
    """
    global _DETACH_HOOK
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    replay = _DetachReplay()
    _DETACH_HOOK = replay
    try:
        _, analytic = value_and_grad(graph, inputs)
        replay.replaying = True
        worst = 0.0
        for name, base in inputs.items():
            flat = base.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                vals = []
                for h in (fd_step, -fd_step):
                    flat[i] = orig + h
                    replay.pos = 0
                    vals.append(float(forward_eval(graph, inputs)))
                flat[i] = orig
                fd = (vals[0] - vals[1]) / (2.0 * fd_step)
                an = float(analytic[name].reshape(-1)[i])
                worst = max(worst, abs(an - fd) / max(floor, abs(an) + abs(fd)))
    finally:
        _DETACH_HOOK = None
    return worst


# -- optimizer ---------------------------------------------------------------

class AdamState:
    __slots__ = ("m", "v", "t")

    def __init__(self, m: ParamSet, v: ParamSet, t: int = 0):
        self.m, self.v, self.t = m, v, t

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_init(params: ParamSet) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``.

    With ``beta1 = beta2 = 0`` this reduces to sign-normalised SGD, i.e.
    ``g / (|g| + eps)``; callers wanting raw SGD should use ``lr * g`` directly.
    """
    t = state.t + 1
    new_p, new_m, new_v = ParamSet(), ParamSet(), ParamSet()
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam '{k}'", p.shape, g.shape)
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = m / c1 if c1 > 0 else m
        vhat = v / c2 if c2 > 0 else v
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)
