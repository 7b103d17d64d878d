"""Minimal reverse-mode autodiff over dense numpy arrays.

A ``Var`` wraps an immutable numpy buffer and remembers how it was
computed.  ``backward()`` on a scalar walks the tape in reverse
topological order and accumulates gradients into every reachable leaf
with ``requires_grad=True``.

Conventions:
  * f32 is the training default, f64 is used for finite-difference checks.
  * Tracked buffers are never mutated in place; every op allocates.
  * Calling ``backward()`` twice without ``zero_grad()`` accumulates
    gradients (sum of both passes), mirroring the usual tape semantics.
"""

from __future__ import annotations

import numpy as np

from .errors import ParamError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Var:
    """A node in the autodiff graph holding an n-d float array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = _as_array(data, dtype)
        arr = arr.copy() if arr.flags.writeable and arr.base is None else np.array(arr)
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        arr = np.asarray(data)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward_fn if out.requires_grad else None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from self.

        Must be called on a scalar (size-1) Var.  Gradients accumulate
        across repeated calls; use ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                node._accumulate(g)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)


def as_var(x, dtype=None):
    if isinstance(x, Var):
        return x
    return Var(x, dtype=dtype)


def constant(x, dtype=None):
    """An untracked Var, e.g. fixed kernels or identity grids."""
    return Var(x, requires_grad=False, dtype=dtype)


def _sum_to_shape(g, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data + b.data

    def bw(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(g, b.shape)))

    return Var._from_op(out, (a, b), bw)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data - b.data

    def bw(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(-g, b.shape)))

    return Var._from_op(out, (a, b), bw)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data * b.data

    def bw(g):
        return (
            (a, _sum_to_shape(g * b.data, a.shape)),
            (b, _sum_to_shape(g * a.data, b.shape)),
        )

    return Var._from_op(out, (a, b), bw)


def div(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data / b.data

    def bw(g):
        return (
            (a, _sum_to_shape(g / b.data, a.shape)),
            (b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)),
        )

    return Var._from_op(out, (a, b), bw)


def neg(a):
    a = as_var(a)
    return Var._from_op(-a.data, (a,), lambda g: ((a, -g),))


def power(a, p):
    a = as_var(a)
    p = float(p)
    out = a.data**p

    def bw(g):
        return ((a, g * p * a.data ** (p - 1)),)

    return Var._from_op(out, (a,), bw)


def exp(a):
    a = as_var(a)
    out = np.exp(a.data)
    return Var._from_op(out, (a,), lambda g: ((a, g * out),))


def log(a):
    a = as_var(a)
    out = np.log(a.data)
    return Var._from_op(out, (a,), lambda g: ((a, g / a.data),))


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.data)
    return Var._from_op(out, (a,), lambda g: ((a, g * 0.5 / out),))


def vabs(a):
    a = as_var(a)
    out = np.abs(a.data)
    return Var._from_op(out, (a,), lambda g: ((a, g * np.sign(a.data)),))


def relu(a):
    a = as_var(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return Var._from_op(out, (a,), lambda g: ((a, g * mask),))


def leaky_relu(a, slope=0.2):
    a = as_var(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    out = a.data * factor
    return Var._from_op(out, (a,), lambda g: ((a, g * factor),))


# -- reductions ----------------------------------------------------------


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            g = g.reshape(shape)
        return ((a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False)),)

    return Var._from_op(np.asarray(out), (a,), bw)


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return vsum(a, axis, keepdims) * (1.0 / n)


# -- shape manipulation ----------------------------------------------------


def reshape(a, *shape):
    a = as_var(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.shape)),)

    return Var._from_op(out, (a,), bw)


def transpose(a, axes):
    a = as_var(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        return ((a, g.transpose(inv)),)

    return Var._from_op(out, (a,), bw)


def swapaxes(a, ax1, ax2):
    axes = list(range(as_var(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a, idx):
    a = as_var(a)
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return Var._from_op(out, (a,), bw)


def concat(vs, axis=0):
    vs = [as_var(v) for v in vs]
    out = np.concatenate([v.data for v in vs], axis=axis)
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(vs, parts))

    return Var._from_op(out, tuple(vs), bw)


def pad_zero(a, pad_width):
    """Zero-pad; pad_width follows np.pad conventions."""
    a = as_var(a)
    out = np.pad(a.data, pad_width, mode="constant")
    slices = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))

    def bw(g):
        return ((a, g[slices]),)

    return Var._from_op(out, (a,), bw)


def pad_replicate(a, pad_width):
    """Edge-replicating pad; border gradients fold back onto edge cells."""
    a = as_var(a)
    out = np.pad(a.data, pad_width, mode="edge")

    def bw(g):
        ga = g
        for ax, (lo, hi) in enumerate(pad_width):
            if lo == 0 and hi == 0:
                continue
            n = ga.shape[ax]
            idx = lambda s: tuple(
                s if i == ax else slice(None) for i in range(ga.ndim)
            )
            core = np.ascontiguousarray(ga[idx(slice(lo, n - hi if hi else None))])
            if lo:
                edge = ga[idx(slice(0, lo))].sum(axis=ax, keepdims=True)
                sl = idx(slice(0, 1))
                core[sl] = core[sl] + edge
            if hi:
                edge = ga[idx(slice(n - hi, n))].sum(axis=ax, keepdims=True)
                sl = idx(slice(core.shape[ax] - 1, core.shape[ax]))
                core[sl] = core[sl] + edge
            ga = core
        return ((a, ga),)

    return Var._from_op(out, (a,), bw)


# -- linear algebra / softmax -------------------------------------------------


def matmul(a, b):
    """Batched matrix product; leading dims broadcast, trailing two contract."""
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _sum_to_shape(ga, a.shape)), (b, _sum_to_shape(gb, b.shape)))

    return Var._from_op(out, (a, b), bw)


def softmax(a, axis=-1, temperature=1.0):
    """exp((x - max)/t) normalized along ``axis``; rows sum to one."""
    a = as_var(a)
    t = float(temperature)
    if t <= 0:
        raise ParamError(f"softmax temperature must be positive, got {t}")
    z = (a.data - a.data.max(axis=axis, keepdims=True)) / t
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((a, (g - inner) * out / t),)

    return Var._from_op(out, (a,), bw)
