"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Everything trainable in this package runs through `record`: each operation
computes its forward value with numpy and, when a tape is active and an
input requires gradients, registers a vector-Jacobian product for the
backward sweep. One tape per training step; replaying it in reverse yields
gradients for every leaf. Also holds the Adam optimizer and the polynomial
learning-rate schedule shared by all training loops.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NumericsError(ArithmeticError):
    """A tensor holds NaN or Inf, which the engine treats as a hard fault."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar loss, replayed tape, off-tape loss."""


_DTYPE = np.float32
_FINITE_CHECKS = True
_ACTIVE_TAPE = None


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the construction dtype (float64 for gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def set_finite_checks(enabled):
    """Toggle per-op finiteness validation. On by default."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _all_finite(arr):
    return bool(np.isfinite(arr).all())


_ALLOC_TUNED = False


def enable_allocator_reuse():
    """Keep large freed blocks on the heap instead of returning them to the
    OS, so the per-step tensor churn stops paying page-fault costs. Safe to
    call repeatedly; no-op where glibc mallopt is unavailable."""
    global _ALLOC_TUNED
    if _ALLOC_TUNED:
        return
    _ALLOC_TUNED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


class Tensor:
    """A dense row-major float array plus autodiff bookkeeping.

    `data` is the numpy array, `requires_grad` marks trainable leaves, and
    (`node_id`, `_tape`) locate the tensor on the currently active tape.
    Tensors hash by identity so they can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=_DTYPE)
        if _FINITE_CHECKS and not _all_finite(arr):
            raise NumericsError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Copy of the value with no gradient tracking."""
        return Tensor._wrap(self.data, requires_grad=False)

    # Arithmetic sugar; every path goes through `record`.
    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("sub", [self, other])

    def __rsub__(self, other):
        return record("sub", [other, self])

    def __mul__(self, other):
        return record("mul", [self, other])

    def __rmul__(self, other):
        return record("mul", [other, self])

    def __truediv__(self, other):
        return record("div", [self, other])

    def __rtruediv__(self, other):
        return record("div", [other, self])

    def __neg__(self):
        return record("neg", [self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=shape)

    def transpose(self, axes=None):
        return record("transpose", [self], axes=axes)

    def sum(self, axis=None, keepdims=False):
        return record("reduce_sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("reduce_mean", [self], axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("op", "in_ids", "vjp", "leaf")

    def __init__(self, op, in_ids, vjp, leaf=None):
        self.op = op
        self.in_ids = in_ids
        self.vjp = vjp
        self.leaf = leaf


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so the list itself is a
    topological order and the backward sweep is a single reverse walk.
    A tape can be consumed by `backward` exactly once.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; nest tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def _leaf_id(self, t):
        """Node id of `t` on this tape, registering a leaf if needed."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        node_id = len(self._nodes)
        self._nodes.append(_Node("leaf", (), None, leaf=t))
        t._tape = self
        t.node_id = node_id
        return node_id

    def _record(self, op, in_tensors, out, vjp):
        if self._consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        in_ids = tuple(
            self._leaf_id(t) if t.requires_grad else None for t in in_tensors
        )
        node_id = len(self._nodes)
        self._nodes.append(_Node(op, in_ids, vjp))
        out._tape = self
        out.node_id = node_id

    def backward(self, loss, params=None):
        """Reverse sweep from `loss`; returns {leaf Tensor: grad Tensor}.

        `params`, when given, fixes the set of returned leaves; any of them
        unreachable from the loss get zero gradients of matching shape.
        """
        if self._consumed:
            raise TapeError("tape already consumed; backward may run once per tape")
        self._consumed = True
        if not isinstance(loss, Tensor):
            raise TapeError("loss must be a Tensor")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss was not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")

        grads = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for node_id in range(len(self._nodes) - 1, -1, -1):
            node = self._nodes[node_id]
            if node.leaf is not None:
                continue  # keep leaf slots for collection below
            g = grads[node_id]
            grads[node_id] = None  # free intermediates as we go
            if g is None or node.vjp is None:
                continue
            for in_id, gin in zip(node.in_ids, node.vjp(g)):
                if in_id is None or gin is None:
                    continue
                if grads[in_id] is None:
                    grads[in_id] = gin
                else:
                    grads[in_id] = grads[in_id] + gin

        out = {}
        for node_id, node in enumerate(self._nodes):
            if node.leaf is None or not node.leaf.requires_grad:
                continue
            g = grads[node_id]
            if g is None:
                g = np.zeros_like(node.leaf.data)
            out[node.leaf] = Tensor._wrap(np.asarray(g))
        if params is not None:
            full = {}
            for p in params:
                full[p] = out.get(p, Tensor._wrap(np.zeros_like(p.data)))
            return full
        return out


def active_tape():
    return _ACTIVE_TAPE


def backward(loss, params=None):
    """Module-level convenience: run backward on the loss tensor's tape."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    return loss._tape.backward(loss, params=params)


# ---------------------------------------------------------------------------
# operation registry


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, fn, da, db):
    def forward(arrs, attrs):
        a, b = arrs
        try:
            out = fn(a, b)
        except ValueError:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
        def vjp(g):
            return (
                _unbroadcast(da(g, a, b), a.shape),
                _unbroadcast(db(g, a, b), b.shape),
            )
        return out, vjp
    return forward


def _matmul_forward(arrs, attrs):
    a, b = arrs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # weight-style operand: one flat gemm instead of a batched reduce
            gb = np.matmul(
                a.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _reshape_forward(arrs, attrs):
    (a,) = arrs
    shape = attrs["shape"]
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return out, lambda g: (g.reshape(a.shape),)


def _transpose_forward(arrs, attrs):
    (a,) = arrs
    axes = attrs.get("axes")
    out = np.transpose(a, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return out, lambda g: (np.transpose(g, inv),)


def _concat_forward(arrs, attrs):
    axis = attrs.get("axis", 0)
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[a.shape for a in arrs]} on axis {axis}"
        )
    sizes = [a.shape[axis] for a in arrs]
    splits = np.cumsum(sizes)[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _slice_forward(arrs, attrs):
    (a,) = arrs
    index = attrs["index"]
    out = a[index]

    def vjp(g):
        full = np.zeros_like(a)
        full[index] = g
        return (full,)

    return out, vjp


def _broadcast_forward(arrs, attrs):
    (a,) = arrs
    shape = attrs["shape"]
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    return np.ascontiguousarray(out), lambda g: (_unbroadcast(g, a.shape),)


def _relu_forward(arrs, attrs):
    (a,) = arrs
    out = np.maximum(a, 0)
    return out, lambda g: (g * (a > 0),)


def _sigmoid_forward(arrs, attrs):
    (a,) = arrs
    out = np.empty_like(a)
    pos = a >= 0
    np.exp(-a, where=pos, out=out)
    out[pos] = 1.0 / (1.0 + out[pos])
    neg = ~pos
    ea = np.exp(a[neg])
    out[neg] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1.0 - out),)


def _tanh_forward(arrs, attrs):
    (a,) = arrs
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _exp_forward(arrs, attrs):
    (a,) = arrs
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log_forward(arrs, attrs):
    (a,) = arrs
    out = np.log(a)
    return out, lambda g: (g / a,)


def _sqrt_forward(arrs, attrs):
    (a,) = arrs
    out = np.sqrt(a)
    return out, lambda g: (g / (2.0 * out),)


def _square_forward(arrs, attrs):
    (a,) = arrs
    return a * a, lambda g: (2.0 * a * g,)


def _abs_forward(arrs, attrs):
    (a,) = arrs
    return np.abs(a), lambda g: (g * np.sign(a),)


def _clip_forward(arrs, attrs):
    (a,) = arrs
    lo, hi = attrs["lo"], attrs["hi"]
    out = np.clip(a, lo, hi)
    mask = (a >= lo) & (a <= hi)
    return out, lambda g: (g * mask,)


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        shape = list(in_shape)
        for ax in axes:
            shape[ax] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def _reduce_sum_forward(arrs, attrs):
    (a,) = arrs
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    axes = _reduce_axes(axis, a.ndim)
    out = np.sum(a, axis=axes, keepdims=keepdims)
    return out, lambda g: (np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keepdims)),)


def _reduce_mean_forward(arrs, attrs):
    (a,) = arrs
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    axes = _reduce_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = np.mean(a, axis=axes, keepdims=keepdims)
    inv = np.asarray(1.0 / count, dtype=a.dtype)
    return out, lambda g: (
        np.ascontiguousarray(_expand_reduced(g, a.shape, axes, keepdims)) * inv,
    )


def _softmax_forward(arrs, attrs):
    (a,) = arrs
    axis = attrs.get("axis", -1)
    shifted = a - np.max(a, axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= np.sum(shifted, axis=axis, keepdims=True)
    out = shifted

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return out, vjp


def _conv1d_forward(arrs, attrs):
    x, w = arrs
    stride = attrs.get("stride", 1)
    dilation = attrs.get("dilation", 1)
    causal = attrs.get("causal", False)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected (n,t,c) and (k,c,f), got {x.shape}, {w.shape}")
    n, t, c_in = x.shape
    k, c_w, f = w.shape
    if c_w != c_in:
        raise ShapeError(f"conv1d: input channels {c_in} != weight channels {c_w}")
    if t < 1:
        raise ShapeError("conv1d: empty time axis")

    t_out = -(-t // stride)  # ceil
    span = (t_out - 1) * stride + (k - 1) * dilation + 1
    if causal:
        pad_left = (k - 1) * dilation
        pad_right = max(0, span - (t + pad_left))
    else:
        pad_total = max(0, span - t)
        pad_left = pad_total // 2
        pad_right = pad_total - pad_left
    xp = np.pad(x, ((0, 0), (pad_left, pad_right), (0, 0)))
    reach = (t_out - 1) * stride + 1

    # im2col: one contiguous gather, then a single gemm
    cols = np.empty((n, t_out, k, c_in), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, j * dilation : j * dilation + reach : stride, :]
    out = np.matmul(cols.reshape(n * t_out, k * c_in),
                    w.reshape(k * c_in, f)).reshape(n, t_out, f)

    def vjp(g):
        g2 = g.reshape(n * t_out, f)
        gw = np.matmul(cols.reshape(n * t_out, k * c_in).T, g2).reshape(w.shape)
        dcols = np.matmul(g2, w.reshape(k * c_in, f).T).reshape(n, t_out, k, c_in)
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, w))
        for j in range(k):
            gxp[:, j * dilation : j * dilation + reach : stride, :] += dcols[:, :, j, :]
        return gxp[:, pad_left : pad_left + t, :], gw

    return out, vjp


def _tconv1d_forward(arrs, attrs):
    x, w = arrs
    stride = attrs.get("stride", 1)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"tconv1d: expected (n,t,c) and (k,c,f), got {x.shape}, {w.shape}")
    n, t, c_in = x.shape
    k, c_w, f = w.shape
    if c_w != c_in:
        raise ShapeError(f"tconv1d: input channels {c_in} != weight channels {c_w}")

    t_out = t * stride
    full = (t - 1) * stride + k
    reach = (t - 1) * stride + 1
    # one gemm against all kernel taps, then overlap-add the taps
    wt = np.ascontiguousarray(w.transpose(1, 0, 2)).reshape(c_in, k * f)
    prod = np.matmul(x.reshape(n * t, c_in), wt).reshape(n, t, k, f)
    y = np.zeros((n, max(full, t_out), f), dtype=prod.dtype)
    for j in range(k):
        y[:, j : j + reach : stride, :] += prod[:, :, j, :]
    crop = max(0, full - t_out) // 2
    out = np.ascontiguousarray(y[:, crop : crop + t_out, :])

    def vjp(g):
        gf = np.zeros((n, max(full, t_out), f), dtype=g.dtype)
        gf[:, crop : crop + t_out, :] = g
        dprod = np.empty((n, t, k, f), dtype=np.result_type(g, w))
        for j in range(k):
            dprod[:, :, j, :] = gf[:, j : j + reach : stride, :]
        dprod2 = dprod.reshape(n * t, k * f)
        gx = np.matmul(dprod2, wt.T).reshape(x.shape)
        gw = np.matmul(x.reshape(n * t, c_in).T, dprod2)
        gw = gw.reshape(c_in, k, f).transpose(1, 0, 2).copy()
        return gx, gw

    return out, vjp


def _attention_forward(arrs, attrs):
    """Fused scaled dot-product attention over (n, heads, t, d) operands.

    softmax(scale * q k^T) v in one node, so the (t x t) intermediates stay
    out of the tape and the backward runs the minimal set of gemms.
    """
    q, k, v = arrs
    scale = attrs["scale"]
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(
            f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    p = np.matmul(q, np.swapaxes(k, -1, -2))
    p *= scale
    np.subtract(p, p.max(axis=-1, keepdims=True), out=p)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v)

    def vjp(g):
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v, -1, -2))
        dp *= p
        dp -= p * dp.sum(axis=-1, keepdims=True)
        dq = np.matmul(dp, k)
        dq *= scale
        dk = np.matmul(np.swapaxes(dp, -1, -2), q)
        dk *= scale
        return dq, dk, dv

    return out, vjp


def _lstm_forward(arrs, attrs):
    """One whole LSTM layer as a single node: gates i, f, g, o, zero initial
    state, left-to-right scan. Output is the full hidden sequence (n, t, h);
    the VJP runs backpropagation through time over the saved activations.
    """
    x, wx, wh, b = arrs
    hidden = attrs["hidden"]
    if x.ndim != 3:
        raise ShapeError(f"lstm: expected (n, t, d), got {x.shape}")
    n, t, d_in = x.shape
    if t < 1:
        raise ShapeError("lstm: empty sequence")
    if wx.shape != (d_in, 4 * hidden) or wh.shape != (hidden, 4 * hidden):
        raise ShapeError(
            f"lstm: weight shapes {wx.shape}/{wh.shape} do not match "
            f"input {d_in} and hidden {hidden}"
        )
    dt = np.result_type(x, wx, wh, b)
    xw = np.matmul(x.reshape(n * t, d_in), wx).astype(dt).reshape(n, t, 4 * hidden)
    xw += b
    h = np.zeros((n, hidden), dtype=dt)
    c = np.zeros((n, hidden), dtype=dt)
    seq = np.empty((n, t, hidden), dtype=dt)
    gates_act = np.empty((n, t, 4 * hidden), dtype=dt)  # i, f, g, o post-activation
    tanh_c = np.empty((n, t, hidden), dtype=dt)
    c_prev = np.empty((n, t, hidden), dtype=dt)
    hs = hidden
    for s in range(t):
        gates = xw[:, s] + np.matmul(h, wh)
        with np.errstate(over="ignore"):
            act_i = 1.0 / (1.0 + np.exp(-gates[:, :hs]))
            act_f = 1.0 / (1.0 + np.exp(-gates[:, hs : 2 * hs]))
            act_o = 1.0 / (1.0 + np.exp(-gates[:, 3 * hs :]))
        act_g = np.tanh(gates[:, 2 * hs : 3 * hs])
        c_prev[:, s] = c
        c = act_f * c + act_i * act_g
        tc = np.tanh(c)
        h = act_o * tc
        seq[:, s] = h
        gates_act[:, s, :hs] = act_i
        gates_act[:, s, hs : 2 * hs] = act_f
        gates_act[:, s, 2 * hs : 3 * hs] = act_g
        gates_act[:, s, 3 * hs :] = act_o
        tanh_c[:, s] = tc

    def vjp(g_seq):
        dgates = np.empty((n, t, 4 * hs), dtype=dt)
        dh = np.zeros((n, hs), dtype=dt)
        dc = np.zeros((n, hs), dtype=dt)
        wh_t = wh.T
        for s in range(t - 1, -1, -1):
            dh = dh + g_seq[:, s]
            act_i = gates_act[:, s, :hs]
            act_f = gates_act[:, s, hs : 2 * hs]
            act_g = gates_act[:, s, 2 * hs : 3 * hs]
            act_o = gates_act[:, s, 3 * hs :]
            tc = tanh_c[:, s]
            d_o = dh * tc
            dcs = dc + dh * act_o * (1.0 - tc * tc)
            dgates[:, s, :hs] = dcs * act_g * act_i * (1.0 - act_i)
            dgates[:, s, hs : 2 * hs] = dcs * c_prev[:, s] * act_f * (1.0 - act_f)
            dgates[:, s, 2 * hs : 3 * hs] = dcs * act_i * (1.0 - act_g * act_g)
            dgates[:, s, 3 * hs :] = d_o * act_o * (1.0 - act_o)
            dc = dcs * act_f
            dh = np.matmul(dgates[:, s], wh_t)
        d2 = dgates.reshape(n * t, 4 * hs)
        dwx = np.matmul(x.reshape(n * t, d_in).T, d2)
        h_prev = np.concatenate(
            [np.zeros((n, 1, hs), dtype=dt), seq[:, :-1]], axis=1)
        dwh = np.matmul(h_prev.reshape(n * t, hs).T, d2)
        db = d2.sum(axis=0)
        dx = np.matmul(d2, wx.T).reshape(n, t, d_in)
        return dx, dwx, dwh, db

    return seq, vjp


_OPS = {
    "add": _binary("add", np.add, lambda g, a, b: g, lambda g, a, b: g),
    "sub": _binary("sub", np.subtract, lambda g, a, b: g, lambda g, a, b: -g),
    "mul": _binary("mul", np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a),
    "div": _binary(
        "div",
        np.divide,
        lambda g, a, b: g / b,
        lambda g, a, b: -g * a / (b * b),
    ),
    "neg": lambda arrs, attrs: (-arrs[0], lambda g: (-g,)),
    "matmul": _matmul_forward,
    "reshape": _reshape_forward,
    "transpose": _transpose_forward,
    "concat": _concat_forward,
    "slice": _slice_forward,
    "broadcast": _broadcast_forward,
    "relu": _relu_forward,
    "sigmoid": _sigmoid_forward,
    "tanh": _tanh_forward,
    "exp": _exp_forward,
    "log": _log_forward,
    "sqrt": _sqrt_forward,
    "square": _square_forward,
    "abs": _abs_forward,
    "clip": _clip_forward,
    "reduce_sum": _reduce_sum_forward,
    "reduce_mean": _reduce_mean_forward,
    "softmax": _softmax_forward,
    "conv1d": _conv1d_forward,
    "tconv1d": _tconv1d_forward,
    "attention": _attention_forward,
    "lstm": _lstm_forward,
}

# ops that only move or mask data: a finite input set implies a finite
# output, so the per-op finiteness check would be redundant work
_CHECK_EXEMPT = frozenset(
    ("reshape", "transpose", "concat", "slice", "broadcast",
     "neg", "relu", "clip", "abs")
)


def record(op_kind, inputs, **attrs):
    """Apply `op_kind` to `inputs`, recording it on the active tape.

    Returns the output tensor. The op lands on the tape only when a tape is
    active and at least one input requires gradients; otherwise this is a
    plain numpy evaluation.
    """
    try:
        forward = _OPS[op_kind]
    except KeyError:
        raise ShapeError(f"unknown op kind '{op_kind}'")
    tensors = [as_tensor(x) for x in inputs]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out_arr, vjp = forward([t.data for t in tensors], attrs)
    if (_FINITE_CHECKS and op_kind not in _CHECK_EXEMPT
            and not _all_finite(out_arr)):
        raise NumericsError(f"op '{op_kind}' produced non-finite values")
    requires_grad = any(t.requires_grad for t in tensors)
    out = Tensor._wrap(out_arr, requires_grad=requires_grad)
    if requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(op_kind, tensors, out, vjp)
    return out


# shorthand wrappers used across the package
def relu(x):
    return record("relu", [x])


def sigmoid(x):
    return record("sigmoid", [x])


def tanh(x):
    return record("tanh", [x])


def exp(x):
    return record("exp", [x])


def log(x):
    return record("log", [x])


def sqrt(x):
    return record("sqrt", [x])


def square(x):
    return record("square", [x])


def absolute(x):
    return record("abs", [x])


def clip(x, lo, hi):
    return record("clip", [x], lo=lo, hi=hi)


def softmax(x, axis=-1):
    return record("softmax", [x], axis=axis)


def attention(q, k, v, scale):
    return record("attention", [q, k, v], scale=scale)


def concat(xs, axis=0):
    return record("concat", list(xs), axis=axis)


def matmul(a, b):
    return record("matmul", [a, b])


def slice_(x, index):
    return record("slice", [x], index=index)


def broadcast_to(x, shape):
    return record("broadcast", [x], shape=shape)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class LrSchedule:
    """Polynomial decay from initial_lr to end_lr over decay_steps."""

    initial_lr: float
    end_lr: float
    power: float = 0.5
    decay_steps: int = 1

    def __post_init__(self):
        if not (self.initial_lr > self.end_lr > 0):
            raise ValueError("schedule requires initial_lr > end_lr > 0")
        if self.power <= 0:
            raise ValueError("schedule power must be positive")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")


def poly_decay_lr(step, sched):
    """Learning rate at `step`; clamps to end_lr once decay_steps is reached."""
    frac = min(step, sched.decay_steps) / sched.decay_steps
    return (sched.initial_lr - sched.end_lr) * (1.0 - frac) ** sched.power + sched.end_lr


@dataclass
class AdamState:
    """First/second-moment accumulators, one pair per parameter tensor."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params, beta1=0.9, beta2=0.999, epsilon=1e-8):
    state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)
    for p in params:
        state.m.append(np.zeros_like(p.data))
        state.v.append(np.zeros_like(p.data))
    return state


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    if lr <= 0:
        raise ValueError("adam_step requires lr > 0")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    scale = lr * math.sqrt(bc2) / bc1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        garr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=p.data.dtype)
        if garr.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {garr.shape} != parameter shape {p.data.shape}"
            )
        m += (1.0 - b1) * (garr - m)
        v += (1.0 - b2) * (garr * garr - v)
        p.data -= scale * m / (np.sqrt(v) + state.epsilon * math.sqrt(bc2))
    return params, state
