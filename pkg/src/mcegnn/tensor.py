"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations on tensors that require gradients append a record to the active
tape. Records are appended in execution order, so the tape is already
topologically sorted and :func:`backward` simply replays it in reverse.

Shapes never broadcast implicitly. The few places that need it have their
own op (``linear`` for the bias row, ``outer`` and ``broadcast_channels``
for vector channels, ``scale_rows`` for per-node constants).
"""
import itertools
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels, rng

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "is_leaf")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.node_id = next(_ids) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Record:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered list of recorded operations."""

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape():
    return _state.tape


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, data, inputs, vjp):
    if _state.enabled and any(t.requires_grad for t in inputs):
        out = Tensor(data)
        out.requires_grad = True
        out.is_leaf = False
        out.node_id = next(_ids)
        _state.tape.records.append(Record(op, inputs, out, vjp))
        return out
    return Tensor(data)


def backward(output, leaves=()):
    """Populate ``.grad`` on every leaf that ``output`` depends on.

    Leaves listed in ``leaves`` that the output does not reach get a zero
    gradient. The tape is cleared afterwards.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    tape = _state.tape
    try:
        if output.requires_grad and output.is_leaf:
            g = np.ones_like(output.data)
            output.grad = g if output.grad is None else output.grad + g
        elif output.requires_grad:
            grads = {output.node_id: np.ones_like(output.data)}
            for rec in reversed(tape.records):
                g = grads.pop(rec.output.node_id, None)
                if g is None:
                    continue
                for inp, gi in zip(rec.inputs, rec.vjp(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    if inp.is_leaf:
                        inp.grad = np.array(gi) if inp.grad is None else inp.grad + gi
                    else:
                        prev = grads.get(inp.node_id)
                        grads[inp.node_id] = gi if prev is None else prev + gi
    finally:
        tape.clear()
    for leaf in leaves:
        if leaf.grad is None:
            leaf.zero_grad()


# constructors ---------------------------------------------------------------


def tensor_new(shape, values, requires_grad=False):
    shape = tuple(int(s) for s in shape)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if int(np.prod(shape, dtype=np.int64)) != values.size:
        raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {values.size}")
    return Tensor(values.reshape(shape).copy(), requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def randn(shape, seed, requires_grad=False):
    """Standard normal samples from the ``randn`` Philox stream."""
    g = rng.stream(seed, "randn")
    return Tensor(g.standard_normal(tuple(shape)), requires_grad=requires_grad)


# elementwise ----------------------------------------------------------------


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a, b, kind):
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def scale(a, s):
    s = float(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def scale_rows(a, coef):
    """Multiply row ``i`` (leading axis) by the constant ``coef[i]``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: need {a.shape[0]} coefficients, got {coef.shape}")
    c = coef.reshape((-1,) + (1,) * (a.data.ndim - 1))
    return _emit("scale_rows", a.data * c, (a,), lambda g: (g * c,))


def silu(a):
    x = a.data
    # sigmoid(x) = (1 + tanh(x / 2)) / 2, overflow-free for any x
    s = np.multiply(x, 0.5)
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    y = x * s
    if not (_state.enabled and a.requires_grad):
        return Tensor(y)
    return _emit("silu", y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


# linear algebra -------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None):
    """``x @ w + b`` with the bias row repeated over the batch."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _emit("linear", out, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    out += b.data
    return _emit("linear", out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def outer(v, w):
    """Per-row outer product: ``[n, 3] x [n, m] -> [n, 3, m]``."""
    if v.data.ndim != 2 or w.data.ndim != 2 or v.shape[0] != w.shape[0]:
        raise ShapeError(f"outer: incompatible {v.shape} and {w.shape}")
    vd, wd = v.data, w.data

    def vjp(g):
        return (np.einsum("ndm,nm->nd", g, wd), np.einsum("ndm,nd->nm", g, vd))

    return _emit("outer", vd[:, :, None] * wd[:, None, :], (v, w), vjp)


def channel_mix(d, p):
    """Per-row matrix product ``[E, 3, a] x [E, a, b] -> [E, 3, b]``."""
    if d.data.ndim != 3 or p.data.ndim != 3 or d.shape[0] != p.shape[0] or d.shape[2] != p.shape[1]:
        raise ShapeError(f"channel_mix: incompatible {d.shape} and {p.shape}")
    dd, pd = d.data, p.data

    def vjp(g):
        return (np.matmul(g, pd.transpose(0, 2, 1)), np.matmul(dd.transpose(0, 2, 1), g))

    return _emit("channel_mix", np.matmul(dd, pd), (d, p), vjp)


def channel_sqnorms(x):
    """Squared Euclidean norm of each channel: ``[E, 3, m] -> [E, m]``."""
    if x.data.ndim != 3:
        raise ShapeError(f"channel_sqnorms expects [E, dim, m], got {x.shape}")
    xd = x.data
    out = xd[:, 0, :] * xd[:, 0, :]
    for k in range(1, xd.shape[1]):
        out = out + xd[:, k, :] * xd[:, k, :]
    return _emit("channel_sqnorms", out, (x,), lambda g: (2.0 * xd * g[:, None, :],))


# structural -----------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.data.ndim != ndim or any(p.shape[k] != parts[0].shape[k] for k in range(ndim) if k != ax):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        idx = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _emit("concat", np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp)


def take_slice(a, axis, start, stop):
    ndim = a.data.ndim
    ax = axis % ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of extent {a.shape[ax]}")
    idx = [slice(None)] * ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    full = a.shape

    def vjp(g):
        out = np.zeros(full)
        out[idx] = g
        return (out,)

    return _emit("slice", a.data[idx], (a,), vjp)


def broadcast_channels(x, m):
    """Repeat a single channel ``[n, 3, 1] -> [n, 3, m]``."""
    if x.data.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"broadcast_channels expects [n, dim, 1], got {x.shape}")
    return _emit(
        "broadcast_channels",
        np.repeat(x.data, m, axis=2),
        (x,),
        lambda g: (g.sum(axis=2, keepdims=True),),
    )


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if axis is None:
        shape = a.shape
        return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    ax = axis % a.data.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _emit("sum", a.data.sum(axis=ax), (a,), vjp)


def mean(a):
    return scale(sum(a), 1.0 / max(a.size, 1))


# graph ops ------------------------------------------------------------------


def gather_rows(a, index):
    """``a[index]`` along the leading axis."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    rest = a.shape[1:]

    def vjp(g):
        flat = g.reshape(len(index), -1)
        return (kernels.scatter_add_rows(flat, index, n).reshape((n,) + rest),)

    return _emit("gather_rows", a.data[index], (a,), vjp)


def segment_sum(a, index, n_segments):
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) != a.shape[0]:
        raise ShapeError(f"segment_sum: {len(index)} ids for {a.shape[0]} rows")
    rest = a.shape[1:]
    flat = a.data.reshape(a.shape[0], -1)
    out = kernels.scatter_add_rows(flat, index, n_segments).reshape((n_segments,) + rest)
    return _emit("segment_sum", out, (a,), lambda g: (g[index],))


def edge_differences(x, dst, src):
    """Row ``e`` is ``x[dst[e]] - x[src[e]]``."""
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    n = x.shape[0]
    rest = x.shape[1:]

    def vjp(g):
        flat = g.reshape(len(dst), -1)
        gi = kernels.scatter_add_rows(flat, dst, n)
        gj = kernels.scatter_add_rows(flat, src, n)
        return ((gi - gj).reshape((n,) + rest),)

    return _emit("edge_differences", x.data[dst] - x.data[src], (x,), vjp)


def edge_linear(h, dst, src, rest, w, b):
    """First affine layer of an edge MLP on ``[h[dst], h[src], rest]``.

    Same value as ``linear(concat([gather(h, dst), gather(h, src), rest]), w, b)``
    but the node-feature blocks are multiplied once per node, not per edge.
    """
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    n, k = h.shape
    if w.shape[0] != 2 * k + rest.shape[1] or rest.shape[0] != len(dst):
        raise ShapeError(f"edge_linear: weight {w.shape} does not fit h {h.shape} and rest {rest.shape}")
    hd, rd, wd = h.data, rest.data, w.data
    w_i, w_j, w_r = wd[:k], wd[k : 2 * k], wd[2 * k :]
    out = (hd @ w_i)[dst]
    out += (hd @ w_j)[src]
    out += rd @ w_r
    out += b.data

    def vjp(g):
        g_i = kernels.scatter_add_rows(g, dst, n)
        g_j = kernels.scatter_add_rows(g, src, n)
        gw = np.concatenate([hd.T @ g_i, hd.T @ g_j, rd.T @ g], axis=0)
        return (g_i @ w_i.T + g_j @ w_j.T, g @ w_r.T, gw, g.sum(axis=0))

    return _emit("edge_linear", out, (h, rest, w, b), vjp)
