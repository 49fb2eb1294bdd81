"""A small reverse-mode differentiation tape over numpy arrays.

Every primitive below accepts plain arrays as well as :class:`Var` objects.
With no ``Var`` among the inputs it simply returns the numpy result, so model
code written against these functions runs unchanged for inference (no
recording) and for training (recording on a :class:`Tape`).

Example::

    tape = Tape()
    x = tape.var(np.array(3.0))
    y = x * x
    tape.backward(y)[x]   # -> 6.0
"""
import numpy as np
from scipy.special import expit

from ..errors import DimensionError, UsageError
from . import linalg


class Var:
    __slots__ = ("value", "tape", "index", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape, index, name=None):
        self.value = value
        self.tape = tape
        self.index = index
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
        return f"Var{label}(shape={self.value.shape}, index={self.index})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tape:
    """Records primitives in execution order, which is a topological order."""

    def __init__(self):
        self.nodes = []
        self.values = []
        self.leaves = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, name=None):
        """Register a differentiable leaf."""
        v = Var(np.array(value, dtype=np.float64), self, len(self.nodes), name)
        self.nodes.append(None)
        self.values.append(v.value)
        self.leaves.append(v)
        return v

    def _record(self, value, parents, backward):
        v = Var(value, self, len(self.nodes))
        self.nodes.append(_Node(parents, backward))
        self.values.append(value)
        return v

    def backward(self, output):
        """Return ``{leaf: d output / d leaf}`` for every leaf on this tape."""
        if not isinstance(output, Var) or output.tape is not self:
            raise UsageError("output was not recorded on this tape")
        if output.value.size != 1:
            raise UsageError("backward needs a scalar output")
        adj = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node is None:
                continue
            grads = node.backward(g)
            for p, gp in zip(node.parents, grads):
                if gp is None or not isinstance(p, Var):
                    continue
                j = p.index
                if adj[j] is None:
                    adj[j] = np.asarray(gp, dtype=np.float64)
                else:
                    adj[j] = adj[j] + gp
        out = {}
        for leaf in self.leaves:
            g = adj[leaf.index] if leaf.index <= output.index else None
            out[leaf] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
        return out


def backward(tape, output):
    return tape.backward(output)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise UsageError("operands live on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = av + bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = av - bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = av * bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b):
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape._record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * av / (bv * bv), sb)))


def neg(a):
    tape = _tape(a)
    if tape is None:
        return -a
    return tape._record(-a.value, (a,), lambda g: (-g,))


def matmul(a, b):
    """np.matmul semantics for operands with ndim >= 2 (b may be 1-D)."""
    tape = _tape(a, b)
    av, bv = value(a), value(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 1:
        raise DimensionError("matmul needs a left operand with ndim >= 2")
    if av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out
    vec = bv.ndim == 1

    def back(g):
        if vec:
            ga = g[..., :, None] * bv[None, :]
            gb = np.einsum("...i,...ij->j", g, av)
            return _unbroadcast(ga, av.shape), gb
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape._record(out, (a, b), back)


def spmm(M, x):
    """``M @ x`` for a constant scipy sparse ``M`` and a dense 2-D ``x``."""
    tape = _tape(x)
    xv = value(x)
    if M.shape[1] != xv.shape[0]:
        raise DimensionError(f"spmm: {M.shape} @ {xv.shape}")
    out = np.asarray(M @ xv)
    if tape is None:
        return out
    return tape._record(out, (x,), lambda g: (np.asarray(M.T @ g),))


_PATHS = {}


def _einsum(spec, *arrays):
    # contraction order depends only on the spec and shapes; plan it once
    if len(arrays) < 3:
        return np.einsum(spec, *arrays)
    key = (spec,) + tuple(a.shape for a in arrays)
    path = _PATHS.get(key)
    if path is None:
        path = _PATHS[key] = np.einsum_path(spec, *arrays, optimize="greedy")[0]
    return np.einsum(spec, *arrays, optimize=path)


def einsum(subscripts, *operands):
    """Explicit-output einsum; every input index must appear in the output or
    in another operand so the adjoint is again a plain einsum."""
    if "->" not in subscripts:
        raise UsageError("einsum needs an explicit '->' output")
    tape = _tape(*operands)
    vals = [value(o) for o in operands]
    out = _einsum(subscripts, *vals)
    if tape is None:
        return out
    lhs, rhs = subscripts.replace(" ", "").split("->")
    subs = lhs.split(",")
    for k, s in enumerate(subs):
        elsewhere = set(rhs).union(*[set(t) for j, t in enumerate(subs) if j != k])
        if not set(s) <= elsewhere:
            raise UsageError(f"einsum index in {s!r} is summed only inside one operand")

    def back(g):
        grads = []
        for k, o in enumerate(operands):
            if not isinstance(o, Var):
                grads.append(None)
                continue
            others = [subs[j] for j in range(len(subs)) if j != k]
            spec = ",".join([rhs] + others) + "->" + subs[k]
            ops = [g] + [vals[j] for j in range(len(vals)) if j != k]
            grads.append(_einsum(spec, *ops))
        return grads

    return tape._record(out, tuple(operands), back)


# ---------------------------------------------------------------- pointwise

def sigmoid_np(x):
    return expit(np.asarray(x, dtype=np.float64))


def sigmoid(x):
    tape = _tape(x)
    xv = np.asarray(value(x), dtype=np.float64)
    s = sigmoid_np(np.atleast_1d(xv)).reshape(xv.shape)
    if tape is None:
        return s
    return tape._record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    tape = _tape(x)
    t = np.tanh(value(x))
    if tape is None:
        return t
    return tape._record(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x):
    tape = _tape(x)
    e = np.exp(value(x))
    if tape is None:
        return e
    return tape._record(e, (x,), lambda g: (g * e,))


def log(x):
    tape = _tape(x)
    xv = value(x)
    out = np.log(xv)
    if tape is None:
        return out
    return tape._record(out, (x,), lambda g: (g / xv,))


def square(x):
    tape = _tape(x)
    xv = value(x)
    if tape is None:
        return xv * xv
    return tape._record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def absolute(x):
    """|x| with subgradient 0 at 0."""
    tape = _tape(x)
    xv = value(x)
    if tape is None:
        return np.abs(xv)
    return tape._record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


# ---------------------------------------------------------------- structure

def total(x, axis=None, keepdims=False):
    tape = _tape(x)
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if tape is None:
        return out
    shape = xv.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return tape._record(np.asarray(out, dtype=np.float64), (x,), back)


def reshape(x, shape):
    tape = _tape(x)
    xv = value(x)
    out = np.reshape(xv, shape)
    if tape is None:
        return out
    old = xv.shape
    return tape._record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    tape = _tape(x)
    xv = value(x)
    if axes is None:
        axes = tuple(range(xv.ndim))[::-1]
    out = np.transpose(xv, axes)
    if tape is None:
        return out
    inv = np.argsort(axes)
    return tape._record(out, (x,), lambda g: (np.transpose(g, inv),))


def index(x, key):
    """Basic slicing (no fancy indexing; use :func:`take` for gathers)."""
    tape = _tape(x)
    xv = value(x)
    out = xv[key]
    if tape is None:
        return out
    shape = xv.shape

    def back(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return tape._record(np.array(out, dtype=np.float64), (x,), back)


def take(x, idx):
    """Gather rows: ``x[idx]`` along axis 0 for an integer index array."""
    tape = _tape(x)
    xv = value(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = xv[idx]
    if tape is None:
        return out
    shape = xv.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return tape._record(out, (x,), back)


def concat(xs, axis=-1):
    tape = _tape(*xs)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape._record(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def softmax_np(z, axis=-1, mask=None):
    z = np.asarray(z, dtype=np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    den = e.sum(axis=axis, keepdims=True)
    return e / np.where(den > 0, den, 1.0)


def softmax(x, axis=-1, mask=None):
    """Max-shifted softmax; masked-out slots get weight exactly 0."""
    tape = _tape(x)
    p = softmax_np(value(x), axis=axis, mask=mask)
    if tape is None:
        return p

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return tape._record(p, (x,), back)


# ---------------------------------------------------------------- losses

def dag_penalty(Wc):
    """trace(e^{Wc*Wc}) - K with the analytic adjoint."""
    tape = _tape(Wc)
    h, grad = linalg.dag_penalty_and_grad(value(Wc))
    if tape is None:
        return h
    return tape._record(np.asarray(h), (Wc,), lambda g: (g * grad,))


def bce_with_logits(z, y, floor=1e-12):
    """Elementwise -[y log p + (1-y) log(1-p)], p = sigmoid(z), with p clamped
    to [floor, 1 - floor]; the clamp has zero gradient."""
    tape = _tape(z)
    zv = np.asarray(value(z), dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    # softplus(-z) for y=1, softplus(z) for y=0
    s = np.where(y > 0.5, -zv, zv)
    raw = np.logaddexp(0.0, s)
    cap = -np.log(floor)
    out = np.minimum(raw, cap)
    if tape is None:
        return out
    p = sigmoid_np(np.atleast_1d(zv)).reshape(zv.shape)
    live = raw < cap
    return tape._record(out, (z,), lambda g: (g * (p - y) * live,))
