"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A ``Tensor`` wraps a row-major float64 array. Differentiable operations
record their input tensors and a vector-Jacobian closure on the output;
``backward`` walks the recorded graph in reverse topological order and
deposits gradients on requires_grad leaves. Everything runs
single-threaded with a fixed accumulation order, so repeated backward
passes over the same graph are bitwise reproducible.

Gradient conventions at non-smooth points: subgradient 0 (relu at 0,
abs at 0), and L2 norms carry an additive 1e-24 guard under the square
root so a zero vector yields a zero gradient instead of NaN.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the named operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Float64 array plus the bookkeeping needed for reverse mode.

    Leaves are built directly (``Tensor(data, requires_grad=True)`` for
    parameters); non-leaves come out of the ops below and carry the
    recorded vjp closure. ``grad`` holds the result of the most recent
    backward pass for requires_grad leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    # Opt out of numpy's ufunc dispatch so `ndarray <op> Tensor` defers to
    # the reflected dunders below instead of building an object array.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

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
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def detach(self):
        """A leaf tensor sharing this tensor's values, cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, accumulate=False):
        """Run reverse mode from this scalar root.

        With ``accumulate=False`` (the default) each requires_grad leaf's
        ``grad`` is replaced by this pass's gradient; with ``accumulate=True``
        the new gradient is summed onto whatever ``grad`` already holds.
        """
        Graph.trace(self).backward(self, accumulate=accumulate)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return tensor_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, parents, data, vjp):
    """Build the output tensor of a primitive, recording it if grad is live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


class Graph:
    """Topologically ordered record of the ops reachable from a root.

    ``nodes`` lists every reachable tensor with each node after all of
    its inputs, so iterating it is a valid execution order and iterating
    it reversed is a valid backward order.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root, accumulate=False):
        if root.data.size != 1:
            raise ValueError(
                f"backward: root must be scalar, got shape {root.shape}"
            )
        pending = {id(root): np.ones_like(root.data)}
        for t in reversed(self.nodes):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if t._vjp is None:
                if t.requires_grad:
                    if accumulate and t.grad is not None:
                        t.grad = t.grad + g
                    else:
                        t.grad = np.array(g)
                continue
            grads = t._vjp(g)
            if len(grads) != len(t._parents):
                raise RuntimeError(
                    f"{t._op}: vjp returned {len(grads)} gradients "
                    f"for {len(t._parents)} inputs"
                )
            for p, pg in zip(t._parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != p.data.shape:
                    raise RuntimeError(
                        f"{t._op}: vjp gradient shape {pg.shape} does not "
                        f"match input shape {p.data.shape}"
                    )
                if id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg


def custom_op(name, forward, backward):
    """Wrap plain-numpy forward/backward callables as a recorded primitive.

    ``forward(*arrays, **params) -> (out_array, ctx)`` runs on the raw
    float64 arrays of the tensor inputs; ``backward(ctx, g)`` receives the
    saved ctx plus the output gradient and returns one gradient array (or
    None) per tensor input. The returned callable takes Tensors plus the
    keyword params and behaves like any built-in op.
    """

    def op(*inputs, **params):
        ts = [as_tensor(t) for t in inputs]
        out, ctx = forward(*[t.data for t in ts], **params)
        out = np.asarray(out, dtype=np.float64)

        def vjp(g):
            return backward(ctx, g)

        return _node(name, ts, out, vjp)

    return op


# ---------------------------------------------------------------------------
# primitives


def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node("add", (a, b), a.data + b.data, vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node("sub", (a, b), a.data - b.data, vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node("mul", (a, b), a.data * b.data, vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node("div", (a, b), a.data / b.data, vjp)


def neg(a):
    a = as_tensor(a)
    return _node("neg", (a,), -a.data, lambda g: (-g,))


def pow(a, p):
    """Elementwise power with a constant (non-tensor) exponent."""
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise ShapeError("pow: exponent must be a plain number")
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node("pow", (a,), out, vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sin(a):
    a = as_tensor(a)
    return _node("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _node("cos", (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch exponentiates a large positive value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        x = a.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _node("softplus", (a,), out, vjp)


def relu(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _node("relu", (a,), np.maximum(a.data, 0.0), vjp)


def abs_(a):
    a = as_tensor(a)
    return _node("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes through wherever output == input."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        mask = np.ones_like(a.data)
        if lo is not None:
            mask = mask * (a.data >= lo)
        if hi is not None:
            mask = mask * (a.data <= hi)
        return (g * mask,)

    return _node("clamp", (a,), out, vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: needs >=1-d operands, got {a.shape} @ {b.shape}")
    # promote vectors to matrices so one rule covers every case,
    # then squeeze the promoted axes back out of the product
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ShapeError(
            f"matmul: shapes {a.shape} and {b.shape} do not align"
        ) from None
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if out.ndim > 1 else out[..., 0]

    def vjp(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -1 if b.ndim == 1 else -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape)
        return ga.reshape(a.data.shape), gb.reshape(b.data.shape)

    return _node("matmul", (a, b), out, vjp)


def getitem(a, key):
    """Numpy-style indexing; backward scatter-adds into the input's shape."""
    a = as_tensor(a)
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)
    out = a.data[key]
    fancy = isinstance(key, np.ndarray) or (
        isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key)
    ) or isinstance(key, list)

    def vjp(g):
        buf = np.zeros_like(a.data)
        if fancy:
            np.add.at(buf, key, g)  # duplicates must sum, not overwrite
        else:
            buf[key] += g
        return (buf,)

    return _node("getitem", (a,), out, vjp)


def take(a, indices):
    """Gather rows along axis 0 by an integer index array."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take: indices must be integers")
    return getitem(a, idx)


def index_add(a, indices, n):
    """Scatter-add rows of `a` into a zeroed (n, ...) buffer (transpose of take)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or len(idx) != a.data.shape[0]:
        raise ShapeError(
            f"index_add: need one index per row, got {idx.shape} for {a.shape}"
        )
    out = np.zeros((n,) + a.data.shape[1:])
    np.add.at(out, idx, a.data)

    def vjp(g):
        return (g[idx],)

    return _node("index_add", (a,), out, vjp)


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("minimum", a, b)

    def vjp(g):
        pick_a = a.data <= b.data
        return (
            _unbroadcast(g * pick_a, a.data.shape),
            _unbroadcast(g * ~pick_a, b.data.shape),
        )

    return _node("minimum", (a, b), np.minimum(a.data, b.data), vjp)


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("maximum", a, b)

    def vjp(g):
        pick_a = a.data >= b.data
        return (
            _unbroadcast(g * pick_a, a.data.shape),
            _unbroadcast(g * ~pick_a, b.data.shape),
        )

    return _node("maximum", (a, b), np.maximum(a.data, b.data), vjp)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node("sum", (a,), out, vjp)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)], dtype=np.float64
    )

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _node("mean", (a,), out, vjp)


def tensor_max(a, axis, keepdims=False):
    """Max over one axis; ties send the gradient to the first maximizer."""
    a = as_tensor(a)
    axis = int(axis)
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
        return (grad,)

    return _node("max", (a,), out, vjp)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _node("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node("transpose", (a,), out, vjp)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}"
        ) from None
    splits = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node("concat", ts, out, vjp)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"stack: shapes {[t.shape for t in ts]} do not match"
        ) from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node("stack", ts, out, vjp)


def cross(a, b):
    """Cross product over the last axis (extent 3), broadcasting the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross: last axis must be 3, got {a.shape} x {b.shape}")
    _binary_shape("cross", a, b)

    def vjp(g):
        return (
            _unbroadcast(np.cross(b.data, g), a.data.shape),
            _unbroadcast(np.cross(g, a.data), b.data.shape),
        )

    return _node("cross", (a, b), np.cross(a.data, b.data), vjp)


NORM_EPS_SQ = 1e-24  # (1e-12)^2 under the root: zero vectors get gradient 0


def norm(a, axis=None, keepdims=False):
    """Guarded L2 norm: sqrt(sum(x^2) + 1e-24)."""
    a = as_tensor(a)
    s = tensor_sum(mul(a, a), axis=axis, keepdims=keepdims)
    return sqrt(add(s, Tensor(NORM_EPS_SQ)))


def normalize(a, axis=-1):
    """x / ||x|| along `axis`, with the guarded norm (zero stays zero)."""
    a = as_tensor(a)
    return mul(a, pow(norm(a, axis=axis, keepdims=True), -1.0))


def cosine_similarity(a, b, axis=-1):
    a, b = as_tensor(a), as_tensor(b)
    num = tensor_sum(mul(a, b), axis=axis)
    return div(num, mul(norm(a, axis=axis), norm(b, axis=axis)))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_index: tuple | None
    checked: int
    message: str = ""

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        tail = f" ({self.message})" if self.message else ""
        return (
            f"grad_check {verdict}: max rel err {self.max_rel_err:.3e} "
            f"over {self.checked} entries{tail}"
        )


def grad_check(f, x, step=1e-5, tol=1e-4, max_entries=None, seed=0):
    """Compare reverse-mode df/dx against central finite differences.

    ``f`` maps a Tensor to a scalar Tensor. The error at each checked
    entry is |a - n| / max(1, |a|, |n|), so near-zero gradients are judged
    absolutely. With ``max_entries`` set, a seeded subsample of entries is
    checked instead of all of them. Any non-finite value of f, of the
    analytic gradient, or of a perturbed evaluation fails the report with
    its location.
    """
    x = as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(False, np.inf, None, 0, "f(x) is non-finite")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    if not np.all(np.isfinite(analytic)):
        bad = np.argwhere(~np.isfinite(analytic))[0]
        return GradCheckReport(
            False, np.inf, tuple(int(i) for i in bad), 0,
            f"non-finite analytic gradient at index {tuple(int(i) for i in bad)}",
        )

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

    def eval_at(values):
        with no_grad():
            return float(f(Tensor(values.reshape(x.data.shape))).data)

    max_err = 0.0
    worst = None
    worst_pair = (0.0, 0.0)
    a_flat = analytic.reshape(-1)
    for i in idx:
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        fp = eval_at(bumped)
        bumped[i] = flat[i] - step
        fm = eval_at(bumped)
        loc = tuple(int(j) for j in np.unravel_index(i, x.data.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheckReport(
                False, np.inf, loc, len(idx),
                f"non-finite perturbed evaluation at index {loc}",
            )
        numeric = (fp - fm) / (2.0 * step)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
        if err > max_err:
            max_err = err
            worst = loc
            worst_pair = (float(a_flat[i]), numeric)
    passed = max_err < tol
    msg = "" if passed else (
        f"analytic {worst_pair[0]:+.6e} vs central diff {worst_pair[1]:+.6e} "
        f"at index {worst}"
    )
    return GradCheckReport(bool(passed), float(max_err), worst, len(idx), msg)
