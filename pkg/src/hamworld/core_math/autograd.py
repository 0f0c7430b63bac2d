"""Tape-based reverse-mode differentiation over numpy arrays.

Every op accepts plain ``np.ndarray`` or :class:`Var` inputs. When no input is a
``Var`` the op is a thin numpy call, so inference code paths (planning,
diagnostics) run without any bookkeeping. When at least one input is a ``Var``
the result is recorded on that input's :class:`GradTape`.

Only first-order reverse mode is provided. Quantities that need a derivative
of a derivative (the Hamiltonian vector field inside the training loss) are
built explicitly from differentiable ops, see :func:`act_grad`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    """A node on a :class:`GradTape`."""

    __slots__ = ("value", "tape", "parents", "vjp", "grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected Var operators

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, k):
        if k != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class GradTape:
    """Records operations on ``Var`` nodes and accumulates parameter gradients.

    Parameters are registered through :meth:`param` under a string id (a
    "parameter group"). :func:`backward` returns a dict keyed by those ids.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}
        self._done = False

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            return self.params[name]
        v = Var(np.asarray(value, dtype=np.float64), self, name=name)
        self.params[name] = v
        return v

    def watch(self, tree, prefix: str = ""):
        """Register every array leaf of ``tree`` as a parameter."""
        from .tree import tree_map

        return tree_map(lambda path, a: self.param(path, a), tree, prefix)

    def leaf(self, value, name=None) -> Var:
        """An input variable whose gradient can be read after backward."""
        v = Var(np.asarray(value, dtype=np.float64), self, name=name)
        self.nodes.append(v)
        return v

    def record(self, value, parents, vjp) -> Var:
        v = Var(value, self, parents, vjp)
        self.nodes.append(v)
        return v


def backward(tape: GradTape, output: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``output``; returns gradients per parameter id.

    Parameters that do not influence the output get all-zero gradients.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise TapeError("output was not produced on this tape")
    if output.value.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.value.shape}")
    if tape._done:
        raise TapeError("tape already consumed by a backward pass")
    tape._done = True
    output.grad = np.ones_like(output.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
    out = {}
    for name, p in tape.params.items():
        out[name] = np.zeros_like(p.value) if p.grad is None else np.asarray(p.grad)
    return out


# ----------------------------------------------------------------------------
# helpers


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _parent(x):
    return x if isinstance(x, Var) else None


# ----------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (_parent(a), _parent(b)),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (_parent(a), _parent(b)),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (_parent(a), _parent(b)),
                       lambda g: (_unbroadcast(g * bv, sa) if isinstance(a, Var) else None,
                                  _unbroadcast(g * av, sb) if isinstance(b, Var) else None))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (_parent(a), _parent(b)),
                       lambda g: (_unbroadcast(g / bv, sa) if isinstance(a, Var) else None,
                                  _unbroadcast(-g * av / (bv * bv), sb) if isinstance(b, Var) else None))


def neg(a):
    av = value(a)
    tape = _tape_of(a)
    if tape is None:
        return -av
    return tape.record(-av, (a,), lambda g: (-g,))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        ga = gb = None
        if isinstance(a, Var):
            ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
            ga = _unbroadcast(ga, av.shape)
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return tape.record(out, (_parent(a), _parent(b)), vjp)


# ----------------------------------------------------------------------------
# unary ops


def _unary(x, fwd: Callable, local: Callable):
    xv = value(x)
    out = fwd(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * local(xv, out),))


def exp(x):
    return _unary(x, np.exp, lambda xv, y: y)


def log(x):
    return _unary(x, np.log, lambda xv, y: 1.0 / xv)


def square(x):
    return _unary(x, np.square, lambda xv, y: 2.0 * xv)


def abs_(x):
    return _unary(x, np.abs, lambda xv, y: np.sign(xv))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    return _unary(x, _sigmoid, lambda xv, y: y * (1.0 - y))


def tanh(x):
    return _unary(x, np.tanh, lambda xv, y: 1.0 - y * y)


def _softplus(x):
    return np.logaddexp(0.0, x)


def softplus(x):
    return _unary(x, _softplus, lambda xv, y: _sigmoid(xv))


def _silu(x):
    return x * _sigmoid(x)


def _silu_d1(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _silu_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def silu(x):
    return _unary(x, _silu, lambda xv, y: _silu_d1(xv))


_ACT = {
    "silu": (_silu, _silu_d1, _silu_d2),
    "tanh": (np.tanh,
             lambda x: 1.0 - np.tanh(x) ** 2,
             lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2)),
    "softplus": (_softplus, _sigmoid, lambda x: _sigmoid(x) * (1.0 - _sigmoid(x))),
    "identity": (lambda x: x, np.ones_like, np.zeros_like),
}
ACTIVATIONS = tuple(_ACT)


def activate(name: str, x):
    if name == "silu":
        return silu(x)
    if name == "tanh":
        return tanh(x)
    if name == "softplus":
        return softplus(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def act_grad(name: str, x):
    """Elementwise derivative of activation ``name`` at ``x``, itself differentiable."""
    _, d1, d2 = _ACT[name]
    return _unary(x, d1, lambda xv, y: d2(xv))


def dense(x, w, b, act: str | None = None):
    """``act(x @ w + b)`` as a single tape node (``act=None`` is linear)."""
    xv, wv, bv = value(x), value(w), value(b)
    h = xv @ wv + bv
    if act is None or act == "identity":
        out, sig = h, None
    elif act == "silu":
        sig = _sigmoid(h)
        out = h * sig
    else:
        out, sig = _ACT[act][0](h), None
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def vjp(g):
        if act is None or act == "identity":
            gh = g
        elif act == "silu":
            gh = g * (sig * (1.0 + h * (1.0 - sig)))
        elif act == "tanh":
            gh = g * (1.0 - out * out)
        else:
            gh = g * _ACT[act][1](h)
        g2 = gh.reshape(-1, gh.shape[-1])
        gx = gh @ wv.T if isinstance(x, Var) else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2 if isinstance(w, Var) else None
        gb = g2.sum(0) if isinstance(b, Var) else None
        return gx, gw, gb

    return tape.record(out, (_parent(x), _parent(w), _parent(b)), vjp)


def rms_norm(x, eps: float = 1e-5):
    """``x / sqrt(mean(x**2, -1) + eps)`` over the last axis."""
    xv = value(x)
    r = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    out = xv * r
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (r * (g - out * np.mean(g * out, -1, keepdims=True)),))


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False):
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    tape = _tape_of(x)
    if tape is None:
        return out
    shape = xv.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return tape.record(out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return div(sum_(x, axis, keepdims), float(n))


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    old = xv.shape
    return tape.record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x):
    xv = value(x)
    out = np.swapaxes(xv, -1, -2)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(x, idx):
    xv = value(x)
    out = xv[idx]
    tape = _tape_of(x)
    if tape is None:
        return out
    shape = xv.shape

    fancy = _is_fancy(idx)

    def vjp(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return tape.record(out, (x,), vjp)


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return tape.record(out, tuple(_parent(x) for x in xs), vjp)


def stack(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    n = len(vals)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return tape.record(out, tuple(_parent(x) for x in xs), vjp)


def log_softmax(x, axis: int = -1):
    xv = value(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    tape = _tape_of(x)
    if tape is None:
        return out
    soft = np.exp(out)
    return tape.record(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def stop_gradient(x):
    return value(x)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the clipped dict and the pre-clip norm.
    """
    norm = global_norm(grads.values())
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
