"""Tape-based reverse-mode differentiation over numpy float64 arrays.

A :class:`Tape` records every primitive applied to its variables. Calling
:meth:`Tape.backward` on a scalar result walks the record in reverse and
accumulates gradients for every variable created with :meth:`Tape.param`.

Primitives: matmul, spmm, add, mul, relu, sigmoid, softmax_rows, log,
square, sum, mean, slice_rows, concat_rows, conv1d_time and reshape.
Subtraction, negation and scaling are expressed through add and mul.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ContractError, ShapeError
from . import sparse as _sparse


class Var:
    """A value living on a tape."""

    __slots__ = ("value", "tape", "id", "requires_grad", "name")

    def __init__(self, value, tape, node_id, requires_grad, name=None):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        return self.tape.grad_of(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = self.name or f"#{self.id}"
        return f"Var({tag}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications.

    Confined to a single thread; build a new tape per training step.
    """

    def __init__(self):
        self._values = []
        self._needs = []
        self._ops = []  # (output id, input ids, vjp)
        self._grads = None
        self.params = []  # (id, name) of differentiable leaves

    def _new(self, value, requires_grad, name=None):
        value = np.asarray(value, dtype=np.float64)
        var = Var(value, self, len(self._values), requires_grad, name)
        self._values.append(value)
        self._needs.append(requires_grad)
        return var

    def param(self, value, name=None):
        """Register a differentiable leaf. The array is copied."""
        var = self._new(np.array(value, dtype=np.float64), True, name)
        self.params.append((var.id, name))
        return var

    def constant(self, value):
        return self._new(value, False)

    def record(self, value, inputs, vjp):
        needs = any(v.requires_grad for v in inputs)
        out = self._new(value, needs)
        if needs:
            self._ops.append((out.id, tuple(v.id for v in inputs), vjp))
        return out

    def backward(self, loss: Var):
        """Reverse accumulation from a scalar ``loss``.

        Returns a dict mapping parameter name (or id when unnamed) to its
        gradient array, with the same shape as the parameter.
        """
        if loss.tape is not self:
            raise ContractError("loss variable belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if self._grads is not None:
            raise ContractError("backward already ran on this tape; record a new tape per step")
        grads = [None] * len(self._values)
        grads[loss.id] = np.ones_like(self._values[loss.id])
        for out_id, in_ids, vjp in reversed(self._ops):
            g = grads[out_id]
            if g is None:
                continue
            contribs = vjp(g)
            for i, c in zip(in_ids, contribs):
                if c is None or not self._needs[i]:
                    continue
                grads[i] = c if grads[i] is None else grads[i] + c
        for pid, _ in self.params:
            if grads[pid] is None:
                grads[pid] = np.zeros_like(self._values[pid])
        # vjp closures reference their Vars, which reference this tape; dropping
        # them breaks the cycle so large intermediates are freed immediately
        self._ops = []
        self._grads = grads
        return {(name if name is not None else pid): grads[pid] for pid, name in self.params}

    def grad_of(self, var):
        if self._grads is None:
            raise ContractError("backward has not been run on this tape")
        return self._grads[var.id]


def backward(tape: Tape, loss: Var):
    return tape.backward(loss)


def _as_var(x, like):
    if isinstance(x, Var):
        return x
    return like.tape.constant(x)


def _pick_tape(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- binary ----------------------------------------------------------------


def _mm(av, bv):
    # one GEMM over the flattened leading axes instead of many stacked ones
    if av.ndim <= 2:
        return av @ bv
    return (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[1],))


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    ref = _pick_tape(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = _mm(av, bv)
    if ref is None:
        return out
    a, b = _as_var(a, ref), _as_var(b, ref)

    def vjp(g):
        ga = _mm(g, bv.T) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = bv.shape[0]
            gb = av.reshape(-1, k).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return ref.tape.record(out, (a, b), vjp)


def spmm(s, x):
    """Sparse constant ``s`` times ``x`` along the leading axis of ``x``."""
    if not isinstance(x, Var):
        return _sparse.spmm(s, x)
    out = _sparse.spmm(s, x.value)

    def vjp(g):
        return (_sparse.spmm_t(s, g),)

    return x.tape.record(out, (x,), vjp)


def add(a, b):
    """Element-wise sum with numpy broadcasting (covers bias addition)."""
    ref = _pick_tape(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    try:
        out = av + bv
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {av.shape} + {bv.shape}") from exc
    if ref is None:
        return out
    a, b = _as_var(a, ref), _as_var(b, ref)

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return ref.tape.record(out, (a, b), vjp)


def mul(a, b):
    """Element-wise product with broadcasting; scalars act as constants."""
    ref = _pick_tape(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    try:
        out = av * bv
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {av.shape} * {bv.shape}") from exc
    if ref is None:
        return out
    a, b = _as_var(a, ref), _as_var(b, ref)

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return ref.tape.record(out, (a, b), vjp)


# -- unary -----------------------------------------------------------------


def _unary(x, fwd, grad_fn):
    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = fwd(xv)
    return x.tape.record(out, (x,), lambda g: (grad_fn(g, xv, out),))


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))


def sigmoid(x):
    return _unary(x, expit, lambda g, v, o: g * o * (1.0 - o))


def _softmax(v):
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    """Softmax over the last axis."""
    return _unary(x, _softmax, lambda g, v, o: o * (g - (g * o).sum(axis=-1, keepdims=True)))


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v)


def square(x):
    return _unary(x, np.square, lambda g, v, o: 2.0 * g * v)


def identity(x):
    return x


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record(out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    shape = x.value.shape if isinstance(x, Var) else np.shape(x)
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    src = x.value.shape
    out = x.value.reshape(shape)
    return x.tape.record(out, (x,), lambda g: (g.reshape(src),))


# -- leading-axis structure ------------------------------------------------


def slice_rows(x, start, stop, axis=0):
    """``x[start:stop]`` along ``axis`` (leading axis by default)."""
    index = [slice(None)] * (x.value if isinstance(x, Var) else np.asarray(x)).ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    if not isinstance(x, Var):
        return np.asarray(x)[index]
    shape = x.value.shape
    out = x.value[index]

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return x.tape.record(out, (x,), vjp)


def concat_rows(xs, axis=0):
    """Concatenate along ``axis`` (leading axis by default)."""
    ref = _pick_tape(*xs)
    vals = [x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat_rows: extents off the concatenation axis differ") from exc
    if ref is None:
        return out
    xs = [_as_var(x, ref) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(vals)))

    return ref.tape.record(out, tuple(xs), vjp)


# -- temporal convolution --------------------------------------------------


def _im2col(xv, k):
    """Stack the ``k`` shifted time slices along channels: ``(..., t_out, k * c_in)``."""
    t_out = xv.shape[-2] - k + 1
    return np.concatenate([xv[..., j:j + t_out, :] for j in range(k)], axis=-1)


def _conv1d_time(xv, wv):
    k, c_in, c_out = wv.shape
    return _mm(_im2col(xv, k), wv.reshape(k * c_in, c_out))


def conv1d_time(x, w):
    """Valid 1-D convolution along the time axis.

    ``x`` has shape ``(..., t, c_in)``; ``w`` has shape ``(k, c_in, c_out)``.
    Output ``(..., t - k + 1, c_out)`` with
    ``out[..., s, :] = sum_j x[..., s + j, :] @ w[j]``.
    """
    ref = _pick_tape(x, w)
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    wv = w.value if isinstance(w, Var) else np.asarray(w, dtype=np.float64)
    if wv.ndim != 3 or xv.ndim < 2 or xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"conv1d_time shape mismatch: x {xv.shape}, w {wv.shape}")
    k = wv.shape[0]
    t = xv.shape[-2]
    if t < k:
        raise ShapeError(f"time extent {t} shorter than kernel {k}")
    out = _conv1d_time(xv, wv)
    if ref is None:
        return out
    x, w = _as_var(x, ref), _as_var(w, ref)
    t_out = t - k + 1

    def vjp(g):
        gx = gw = None
        c_in, c_out = wv.shape[1], wv.shape[2]
        if x.requires_grad:
            gcols = _mm(g, wv.reshape(k * c_in, c_out).T)
            gx = np.zeros_like(xv)
            for j in range(k):
                gx[..., j:j + t_out, :] += gcols[..., j * c_in:(j + 1) * c_in]
        if w.requires_grad:
            cols = _im2col(xv, k).reshape(-1, k * c_in)
            gw = (cols.T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
        return gx, gw

    return ref.tape.record(out, (x, w), vjp)
