"""Minimal reverse-mode autodiff over dense numpy arrays.

A dynamic tape is recorded per forward pass and freed during backward().
Broadcasting is deliberately restricted: elementwise ops require equal
shapes, except for trailing-axis bias adds and scalar multiplies.  Any
other shape mismatch is a hard error.
"""

from __future__ import annotations

import numbers

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float64


def set_precision(name: str) -> None:
    """Switch the global scalar precision ("float32" or "float64")."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter:
    """A named, trainable tensor.  Frozen parameters still receive gradients
    (needed for optimizing through a frozen model) but are skipped by
    optimizers."""

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.frozen = frozen

    @property
    def data(self):
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, frozen={self.frozen})"


def _make(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_const(x):
    if isinstance(x, Tensor):
        raise TypeError("expected a constant, got Tensor")
    return np.asarray(x, dtype=_dtype)


def add(a: Tensor, b) -> Tensor:
    """a + b.  b may be a same-shape Tensor/array, a trailing-axis bias
    (shape == a.shape[-1:]), or a scalar."""
    if not isinstance(b, Tensor):
        c = _as_const(b)
        if c.shape != a.shape and c.ndim != 0 and c.shape != a.shape[-1:]:
            raise ShapeError(f"add: {a.shape} vs constant {c.shape}")
        return _make(a.data + c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 0:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    if a.ndim == 0:
        return _make(a.data + b.data, (a, b), lambda g: (g.sum(), g))
    if b.shape == a.shape[-1:]:
        n = b.shape[0]

        def bwd(g):
            return g, g.reshape(-1, n).sum(axis=0)

        return _make(a.data + b.data, (a, b), bwd)
    raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """a * b for same-shape tensors or a scalar b (number or 0-d Tensor)."""
    if not isinstance(b, Tensor):
        c = _as_const(b)
        if c.ndim != 0 and c.shape != a.shape:
            raise ShapeError(f"mul: {a.shape} vs constant {c.shape}")
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if b.ndim == 0:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum()))
    if a.ndim == 0:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: ((g * bd).sum(), g * ad))
    raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(a.data.sum(), (a,), lambda g: (np.full(shape, g, dtype=_dtype),))


def mean_(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _make(a.data.mean(), (a,), lambda g: (np.full(shape, g / n, dtype=_dtype),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {gain.shape} vs x {x.shape}")
    h = x.shape[-1]
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd * inv * gd

    def bwd(g):
        gg = g * gd
        dx = gg * inv - xd * (inv ** 3 / h) * (gg * xd).sum(axis=-1, keepdims=True)
        dgain = (g * xd * inv).reshape(-1, h).sum(axis=0)
        return dx, dgain

    return _make(y, (x, gain), bwd)


def cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-softmax over non-pad target positions.

    All-pad targets yield a loss of exactly 0 with zero gradient."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    v = logits.shape[1]
    valid = t != pad_id
    if np.any((t[valid] < 0) | (t[valid] >= v)):
        raise ShapeError("cross_entropy: target id out of vocabulary range")
    n = int(valid.sum())
    x = logits.data
    if n == 0:
        return _make(np.asarray(0.0, dtype=_dtype), (logits,), lambda g: (np.zeros_like(x),))
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    rows = np.arange(t.shape[0])
    safe_t = np.where(valid, t, 0)
    nll = -(logp[rows, safe_t] * valid)
    loss = nll.sum() / n

    def bwd(g):
        p = e / z
        d = p.copy()
        d[rows, safe_t] -= 1.0
        d *= (valid / n)[:, None] * g
        return (d,)

    return _make(np.asarray(loss, dtype=_dtype), (logits,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bwd)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape

    def bwd(g):
        d = np.zeros(shape, dtype=_dtype)
        np.add.at(d, idx, g)
        return (d,)

    return _make(out, (a,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ShapeError("embedding: id out of range")
    shape = table.shape

    def bwd(g):
        d = np.zeros(shape, dtype=_dtype)
        np.add.at(d, ids, g)
        return (d,)

    return _make(table.data[ids], (table,), bwd)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.  Populates .grad on every
    reachable requires_grad leaf (accumulating across calls) and frees the
    tape."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        node._parents = ()
        node._backward = None


def grad_check(f, params, eps: float = 1e-5, rng=None, max_coords_per_param=None):
    """Compare analytic gradients of scalar f() against central finite
    differences.  Returns the max relative error over checked coordinates."""
    tensors = []
    for p in params:
        tensors.append(p.tensor if isinstance(p, Parameter) else p)
    for t in tensors:
        t.grad = None
    backward(f())
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        afl = np.zeros(n) if ana is None else ana.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(num), abs(afl[i]), 1e-6)
            worst = max(worst, abs(num - afl[i]) / denom)
    return worst
