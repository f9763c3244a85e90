"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Every op takes :class:`Node` operands (plain arrays and scalars are wrapped
as constants), computes its value eagerly with numpy and, when any operand
requires a gradient, records a backward rule. Graphs are built fresh on
each forward pass; node creation order is a topological order, so
:func:`backward` simply replays the reachable nodes newest-first.
"""

import contextlib
import itertools

import numpy as np

NORM_EPS = 1e-8

_counter = itertools.count()
_grad_enabled = True
_debug = False


class ShapeError(ValueError):
    pass


class Node:
    """A value in the differentiation graph.

    ``grad`` is allocated lazily by :func:`backward` and accumulates across
    calls until :meth:`zero_grad`.
    """

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "uid", "name")
    # make numpy defer to our reflected operators (array * node -> Node)
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_rule=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.uid = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name=None):
    return Node(np.array(value), requires_grad=True, name=name)


def constant(value, dtype=None):
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=dtype))


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward rules (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Raise ``FloatingPointError`` as soon as any op produces NaN/Inf."""
    global _debug
    previous = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = previous


def _wrap(x, like=None):
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def _make(value, parents, rule, op):
    if _debug and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _wrap(a, b if isinstance(b, Node) else None), _wrap(b, a if isinstance(a, Node) else None)
    _check_broadcast("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), rule, "add")


def sub(a, b):
    a, b = _wrap(a, b if isinstance(b, Node) else None), _wrap(b, a if isinstance(a, Node) else None)
    _check_broadcast("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), rule, "sub")


def mul(a, b):
    a, b = _wrap(a, b if isinstance(b, Node) else None), _wrap(b, a if isinstance(a, Node) else None)
    _check_broadcast("mul", a, b)

    def rule(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), rule, "mul")


def tanh(x):
    y = np.tanh(x.value)

    def rule(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), rule, "tanh")


def sigmoid(x):
    # split by sign so exp never overflows
    v = x.value
    z = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(v.dtype, copy=False)

    def rule(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), rule, "sigmoid")


def exp(x):
    y = np.exp(x.value)

    def rule(g):
        return (g * y,)

    return _make(y, (x,), rule, "exp")


def log(x):
    if _debug and np.any(x.value <= 0):
        raise FloatingPointError("log of non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.value)

    def rule(g):
        return (g / x.value,)

    return _make(y, (x,), rule, "log")


ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}


def elementwise(op, *inputs):
    """Dispatch by name to one of the pointwise ops in ``ELEMENTWISE``."""
    return ELEMENTWISE[op](*inputs)


# --------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")

    def rule(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.value @ b.value, (a, b), rule, "matmul")


def transpose(x):
    def rule(g):
        return (g.T,)

    return _make(x.value.T, (x,), rule, "transpose")


def reshape(x, shape):
    def rule(g):
        return (g.reshape(x.shape),)

    return _make(x.value.reshape(shape), (x,), rule, "reshape")


def concat(nodes, axis=-1):
    nodes = [_wrap(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def rule(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _make(value, tuple(nodes), rule, "concat")


def slice_cols(x, start, stop):
    """``x[..., start:stop]``."""

    def rule(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        return (full,)

    return _make(x.value[..., start:stop], (x,), rule, "slice_cols")


def stack(nodes, axis=0):
    value = np.stack([n.value for n in nodes], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _make(value, tuple(nodes), rule, "stack")


def take_rows(x, index):
    """``x[index]`` along the first axis; backward scatter-adds."""
    index = np.asarray(index, dtype=np.intp)

    def rule(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.value[index], (x,), rule, "take_rows")


def sum(x):  # noqa: A001 - mirrors numpy naming
    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.value.sum()), (x,), rule, "sum")


def mean(x):
    n = x.value.size

    def rule(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.asarray(x.value.mean()), (x,), rule, "mean")


def lookup(table, ids):
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise IndexError(f"lookup: id {bad} out of range for table with {n_rows} rows")

    def rule(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.value[ids], (table,), rule, "lookup")


# --------------------------------------------------------------------------
# normalization and probabilities


def _masked_shift(v, mask):
    if mask is None:
        return v - v.max(axis=-1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax: a row is fully masked")
    shifted = np.where(mask, v, -np.inf)
    return shifted - shifted.max(axis=-1, keepdims=True)


def softmax_rows(x, mask=None):
    """Softmax over the last axis; masked entries get exactly zero."""
    shifted = _masked_shift(x.value, mask)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule, "softmax_rows")


def log_softmax_rows(x, mask=None):
    shifted = _masked_shift(x.value, mask)
    with np.errstate(divide="ignore"):
        y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), rule, "log_softmax_rows")


def normalize_to_radius(v, r, eps=NORM_EPS):
    """Rescale each vector along the last axis to Euclidean norm ``r``.

    The norm is guarded as ``sqrt(sum(v**2) + eps**2)`` so zero rows map to
    zero instead of dividing by zero. Backward uses the exact Jacobian of
    the guarded map, ``(r/n) (I - v v^T / n^2)``.
    """
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    vv = v.value
    n = np.sqrt((vv * vv).sum(axis=-1, keepdims=True) + eps * eps)
    y = r * vv / n

    def rule(g):
        vg = (vv * g).sum(axis=-1, keepdims=True)
        return ((r / n) * (g - vv * (vg / (n * n))),)

    return _make(y, (v,), rule, "normalize_to_radius")


def row_norms(x):
    return np.sqrt((np.asarray(x) ** 2).sum(axis=-1))


def pick(logp, ids):
    """``logp[i, ids[i]]`` for every row ``i``."""
    ids = np.asarray(ids, dtype=np.intp)
    rows = np.arange(len(ids))

    def rule(g):
        full = np.zeros_like(logp.value)
        full[rows, ids] = g
        return (full,)

    return _make(logp.value[rows, ids], (logp,), rule, "pick")


def rowdot(q, keys):
    """Scores ``out[b, s] = q[b] . keys[b, s]`` for q [B,d], keys [B,S,d]."""

    def rule(g):
        gq = np.einsum("bs,bsd->bd", g, keys.value) if q.requires_grad else None
        gk = g[:, :, None] * q.value[:, None, :] if keys.requires_grad else None
        return gq, gk

    return _make(np.einsum("bd,bsd->bs", q.value, keys.value), (q, keys), rule, "rowdot")


def weighted_sum(weights, values):
    """``out[b] = sum_s weights[b, s] * values[b, s]``."""

    def rule(g):
        gw = np.einsum("bd,bsd->bs", g, values.value) if weights.requires_grad else None
        gv = weights.value[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return _make(np.einsum("bs,bsd->bd", weights.value, values.value), (weights, values), rule, "weighted_sum")


def dropout(x, p, training, rng):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def rule(g):
        return (g * keep,)

    return _make(x.value * keep, (x,), rule, "dropout")


# --------------------------------------------------------------------------
# backward pass


def _reachable(root):
    seen = {root.uid: root}
    todo = [root]
    while todo:
        node = todo.pop()
        for p in node.parents:
            if p.requires_grad and p.uid not in seen:
                seen[p.uid] = p
                todo.append(p)
    return sorted(seen.values(), key=lambda n: n.uid, reverse=True)


def backward(loss, params=None):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate additively. When ``params`` is given, any of
    them that the loss does not reach gets an explicit zero gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        pending = {loss.uid: np.ones_like(loss.value)}
        for node in _reachable(loss):
            g = pending.pop(node.uid, None)
            if g is None:
                continue
            if node.backward_rule is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.uid in pending:
                    pending[parent.uid] = pending[parent.uid] + pg
                else:
                    pending[parent.uid] = pg
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.value)


# --------------------------------------------------------------------------
# finite differences


def finite_difference_grad(f, param, step=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``param.value``.

    ``f`` must rebuild its graph from ``param.value`` on each call.
    """
    value = param.value
    grad = np.zeros_like(value, dtype=np.float64)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = float(f())
        flat[i] = old - step
        down = float(f())
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-5):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
