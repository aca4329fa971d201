"""Dense tensors with reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
tape: a monotonically increasing ``node_id``, the parent tensors and a
vector-Jacobian closure. :func:`backward` walks the reachable nodes in
decreasing id order, which is a valid reverse topological order because a
node can only be created after its parents.
"""

from __future__ import annotations

import hashlib
import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_node_ids = itertools.count()
_grad_enabled = True
_flop_counter = None
_branch_log = None


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_vjp", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _DTYPES:
            if dtype is None and arr.dtype.kind in "biuf":
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._parents = ()
        self._vjp = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return binary_op(self, other, "add")

    def __radd__(self, other):
        return binary_op(other, self, "add")

    def __sub__(self, other):
        return binary_op(self, other, "sub")

    def __rsub__(self, other):
        return binary_op(other, self, "sub")

    def __mul__(self, other):
        return binary_op(self, other, "mul")

    def __rmul__(self, other):
        return binary_op(other, self, "mul")

    def __truediv__(self, other):
        return binary_op(self, other, "div")

    def __rtruediv__(self, other):
        return binary_op(other, self, "div")

    def __neg__(self):
        return binary_op(self, -1.0, "mul")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, "mean", axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce(self, "max", axes, keepdims)


class GradientMap(dict):
    """Gradients keyed by the leaf tensors that produced them (identity-hashed)."""

    def for_tensor(self, t):
        return self[t]


@contextmanager
def no_grad():
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if isinstance(x, np.ndarray) and dtype is None and x.dtype in _DTYPES:
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def from_op(data, parents, vjp, flops=None):
    """Wrap a forward result and register it on the tape.

    ``vjp(grad_out)`` must return one gradient (or ``None``) per parent, each
    already shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.node_id = None
    out._parents = ()
    out._vjp = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._vjp = vjp
    if _flop_counter is not None:
        _flop_counter.add(int(data.size) if flops is None else int(flops))
    return out


def _check_dtypes(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}; cast explicitly")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from exc


def binary_op(a, b, kind):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("binary_op needs at least one Tensor")
    a = as_tensor(a, like=b if not isinstance(a, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_dtypes(a, b)
    out_shape = broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    if kind == "add":
        data = x + y
        vjp = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    elif kind == "sub":
        data = x - y
        vjp = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    elif kind == "mul":
        data = x * y
        vjp = lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    elif kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            data = x / y

        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape))
    else:
        raise ValueError(f"unknown binary op {kind!r}")
    assert data.shape == out_shape
    return from_op(data, (a, b), vjp)


def add(a, b):
    return binary_op(a, b, "add")


def sub(a, b):
    return binary_op(a, b, "sub")


def mul(a, b):
    return binary_op(a, b, "mul")


def div(a, b):
    return binary_op(a, b, "div")


def matmul(a, b):
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    data = np.matmul(x, y)
    m, k, n = x.shape[-2], x.shape[-1], y.shape[-1]
    batch = int(np.prod(data.shape[:-2], dtype=np.int64))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return from_op(data, (a, b), vjp, flops=2 * batch * m * k * n)


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind):
    x = as_tensor(x)
    v = x.data
    if kind == "relu":
        note_branch(v > 0)
        data = np.maximum(v, 0)
        vjp = lambda g: (g * (v > 0),)
    elif kind == "sigmoid":
        data = _sigmoid(v)
        vjp = lambda g: (g * data * (1 - data),)
    elif kind == "silu":
        s = _sigmoid(v)
        data = v * s
        vjp = lambda g: (g * (s * (1 + v * (1 - s))),)
    elif kind == "exp":
        data = np.exp(v)
        vjp = lambda g: (g * data,)
    elif kind == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(v)
        vjp = lambda g: (g / v,)
    elif kind == "sqrt":
        data = np.sqrt(v)
        vjp = lambda g: (g * 0.5 / data,)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return from_op(data.astype(v.dtype, copy=False), (x,), vjp)


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def silu(x):
    return activation(x, "silu")


def exp(x):
    return activation(x, "exp")


def log(x):
    return activation(x, "log")


def clip_min(x, lo):
    """``max(x, lo)``; gradient passes only where ``x > lo``."""
    x = as_tensor(x)
    v = x.data
    note_branch(v > lo)
    data = np.maximum(v, v.dtype.type(lo))
    return from_op(data, (x,), lambda g: (g * (v > lo),))


def _axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(_axis(a, ndim) for a in axes)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {axes}")
    return tuple(sorted(out))


def softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _axis(axis, x.ndim)
    v = x.data
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return from_op(s, (x,), vjp)


def reduce(x, kind, axes=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes(axes, x.ndim)
    v = x.data
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(v.shape))
    count = int(np.prod([v.shape[i] for i in axes], dtype=np.int64))
    if kind == "sum":
        data = v.sum(axis=axes, keepdims=keepdims)
        vjp = lambda g: (np.broadcast_to(g.reshape(kept_shape), v.shape).copy(),)
    elif kind == "mean":
        data = v.sum(axis=axes, keepdims=keepdims) / v.dtype.type(count)
        vjp = lambda g: (np.broadcast_to(g.reshape(kept_shape) / v.dtype.type(count), v.shape).copy(),)
    elif kind == "max":
        # move reduced axes last and flatten them so argmax picks the first
        # maximum in row-major order
        rest = [i for i in range(v.ndim) if i not in axes]
        moved = np.transpose(v, rest + list(axes)).reshape([v.shape[i] for i in rest] + [count])
        idx = moved.argmax(axis=-1)
        note_branch(idx)
        flat = np.take_along_axis(moved, idx[..., None], axis=-1)[..., 0]
        data = flat.reshape(kept_shape) if keepdims else flat

        def vjp(g):
            gm = np.zeros_like(moved)
            np.put_along_axis(gm, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gm = gm.reshape([v.shape[i] for i in rest] + [v.shape[i] for i in axes])
            inverse = np.argsort(rest + list(axes))
            return (np.transpose(gm, inverse),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return from_op(np.asarray(data, dtype=v.dtype), (x,), vjp, flops=v.size)


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    data = x.data.reshape(shape)
    return from_op(data, (x,), lambda g: (g.reshape(src),), flops=0)


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(_axis(a, x.ndim) for a in axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    return from_op(data, (x,), lambda g: (np.transpose(g, inverse),), flops=0)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    _check_dtypes(*tensors)
    axis = _axis(axis, tensors[0].ndim)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return from_op(data, tuple(tensors), vjp, flops=0)


def getitem(x, index):
    x = as_tensor(x)
    data = np.array(x.data[index], copy=True)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return from_op(data, (x,), vjp, flops=0)


def stop_gradient(x):
    return Tensor(as_tensor(x).data, dtype=as_tensor(x).dtype)


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar ``loss``; returns gradients of all leaves.

    Leaves are tensors created with ``requires_grad=True`` directly (model
    parameters, inputs under test). Fan-out contributions are summed.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must hold a single element, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to the tape (no input requires grad)")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = GradientMap()
    interior = sorted((t for t in nodes.values() if t.node_id is not None), key=lambda t: t.node_id, reverse=True)
    for t in interior:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in nodes.values():
        if t.node_id is None and id(t) in grads:
            leaves[t] = np.asarray(grads[id(t)], dtype=t.dtype).reshape(t.shape)
    return leaves


class FlopCounter:
    """Collects per-scope FLOP totals while active (see :func:`count_flops_of`)."""

    def __init__(self):
        self.scopes = ["<root>"]
        self.by_scope = {}

    def add(self, n):
        key = self.scopes[-1]
        self.by_scope[key] = self.by_scope.get(key, 0) + n

    @property
    def total(self):
        return sum(self.by_scope.values())


def note_branch(selector):
    """Record which branch a piecewise op took (used to detect kinks in finite differences)."""
    if _branch_log is not None:
        _branch_log.append(hashlib.blake2b(np.ascontiguousarray(selector).tobytes(), digest_size=16).digest())


@contextmanager
def recording_branches():
    global _branch_log
    previous, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


@contextmanager
def counting_flops():
    global _flop_counter
    previous, _flop_counter = _flop_counter, FlopCounter()
    try:
        yield _flop_counter
    finally:
        _flop_counter = previous


@contextmanager
def flop_scope(name):
    if _flop_counter is None:
        yield
        return
    _flop_counter.scopes.append(name)
    try:
        yield
    finally:
        _flop_counter.scopes.pop()


def parameter(data, dtype=np.float64, name=None):
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def zeros(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, step=1e-5, indices: Iterable | None = None):
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``t``.

    ``t.data`` is perturbed in place and restored. Returns a dict from flat
    index to derivative estimate (all entries when ``indices`` is None).
    An entry whose two probes land on different branches of a piecewise op
    (ReLU mask, pooling argmax, clamp) straddles a kink and is reported as NaN.
    """
    flat = t.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            with recording_branches() as up:
                hi = float(fn().data.sum())
            flat[i] = orig - step
            with recording_branches() as down:
                lo = float(fn().data.sum())
            flat[i] = orig
            out[int(i)] = (hi - lo) / (2 * step) if up == down else float("nan")
    return out


@dataclass
class GradCheck:
    worst: float
    checked: int
    skipped: int


def gradient_check_report(fn, tensors, step=1e-5, max_entries=None, rng=None, fd_fn=None) -> GradCheck:
    """Largest relative discrepancy between autodiff and central differences.

    Uses ``|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)``. With ``max_entries``
    set, each tensor is probed at that many randomly chosen coordinates.
    Probes that straddle a kink are counted in ``skipped``. ``fd_fn``, when
    given, is differenced instead of ``fn`` (e.g. with loss weights frozen).
    """
    loss = fn()
    grads = backward(loss)
    worst, checked, skipped = 0.0, 0, 0
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        g_ad = grads.get(t)
        g_ad = np.zeros_like(t.data) if g_ad is None else g_ad
        n = t.data.size
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = range(n)
        fd = numerical_gradient(fd_fn or fn, t, step, idx)
        flat = g_ad.reshape(-1)
        for i, v in fd.items():
            if np.isnan(v):
                skipped += 1
                continue
            checked += 1
            worst = max(worst, abs(flat[i] - v) / max(1.0, abs(flat[i]) + abs(v)))
    return GradCheck(worst, checked, skipped)


def gradient_check(fn, tensors, step=1e-5, max_entries=None, rng=None):
    return gradient_check_report(fn, tensors, step, max_entries, rng).worst
