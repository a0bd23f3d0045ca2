"""Parameterized neural layers: dense, dilated/transposed 1-d convolution,
layer normalization, multi-head self-attention, position-wise feed-forward,
a stacked LSTM and a small MLP. Parameters are plain dataclasses of Tensors;
forwards are free functions so the same layer runs on or off a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, record


def glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32),
                  requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def iter_tensors(obj, prefix=""):
    """Yield (name, Tensor) pairs from nested parameter dataclasses."""
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_tensors(item, f"{prefix}.{i}" if prefix else str(i))
        return
    if hasattr(obj, "__dataclass_fields__"):
        for f in dc_fields(obj):
            child = getattr(obj, f.name)
            if isinstance(child, (Tensor, list, tuple)) or hasattr(
                child, "__dataclass_fields__"
            ):
                name = f"{prefix}.{f.name}" if prefix else f.name
                yield from iter_tensors(child, name)


def trainable(obj):
    return [t for _, t in iter_tensors(obj) if t.requires_grad]


# --- dense -------------------------------------------------------------------


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor
    activation: str | None = None


def init_dense(rng, d_in, d_out, activation=None):
    return DenseParams(glorot(rng, (d_in, d_out), d_in, d_out),
                       zeros_param((d_out,)), activation)


def dense_forward(x, params):
    """Affine map over the last axis, optional relu/sigmoid."""
    if x.shape[-1] != params.weight.shape[0]:
        raise ShapeError(
            f"dense: input features {x.shape[-1]} != weight rows {params.weight.shape[0]}"
        )
    out = T.matmul(x, params.weight) + params.bias
    if params.activation == "relu":
        out = T.relu(out)
    elif params.activation == "sigmoid":
        out = T.sigmoid(out)
    elif params.activation is not None:
        raise ValueError(f"unknown activation '{params.activation}'")
    return out


# --- convolutions --------------------------------------------------------------


@dataclass
class Conv1dParams:
    filters: int
    kernel_size: int
    stride: int
    dilation: int
    causal: bool
    weight: Tensor  # (kernel_size, in_channels, filters)
    bias: Tensor    # (filters,)


def init_conv1d(rng, in_channels, filters, kernel_size,
                stride=1, dilation=1, causal=False):
    if kernel_size < 1 or stride < 1 or dilation < 1:
        raise ValueError("conv1d: kernel_size, stride and dilation must be >= 1")
    w = glorot(rng, (kernel_size, in_channels, filters),
               kernel_size * in_channels, filters)
    return Conv1dParams(filters, kernel_size, stride, dilation, causal,
                        w, zeros_param((filters,)))


def conv1d_forward(x, params):
    """1-d convolution over (n, t, c_in).

    causal=True left-pads by (kernel-1)*dilation so position i never sees
    inputs past i*stride; causal=False applies symmetric 'same' padding.
    Output length is ceil(t / stride).
    """
    out = record("conv1d", [x, params.weight], stride=params.stride,
                 dilation=params.dilation, causal=params.causal)
    return out + params.bias


@dataclass
class TransposedConv1dParams:
    filters: int
    kernel_size: int
    stride: int
    weight: Tensor  # (kernel_size, in_channels, filters)
    bias: Tensor


def init_tconv1d(rng, in_channels, filters, kernel_size, stride=1):
    w = glorot(rng, (kernel_size, in_channels, filters),
               kernel_size * in_channels, filters)
    return TransposedConv1dParams(filters, kernel_size, stride, w,
                                  zeros_param((filters,)))


def tconv1d_forward(x, params):
    """Length-upsampling transposed convolution; output length is exactly
    t*stride, cropping kernel overshoot symmetrically."""
    out = record("tconv1d", [x, params.weight], stride=params.stride)
    return out + params.bias


# --- layer normalization -------------------------------------------------------


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    epsilon: float = 1e-5


def init_layer_norm(channels, epsilon=1e-5):
    return LayerNormParams(
        Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
        zeros_param((channels,)), epsilon)


def layer_norm_forward(x, params):
    """Normalize each (sample, step) over channels, then gain*x + bias."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = T.square(centered).mean(axis=-1, keepdims=True)
    norm = centered / T.sqrt(var + params.epsilon)
    return norm * params.gain + params.bias


def sample_norm_forward(x, params):
    """Normalize each sample over its whole (time, channels) slab, then a
    per-channel affine. Unlike the per-step variant this keeps temporal
    structure intact for univariate series, so the branch blocks use it."""
    mu = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mu
    var = T.square(centered).mean(axis=(1, 2), keepdims=True)
    norm = centered / T.sqrt(var + params.epsilon)
    return norm * params.gain + params.bias


# --- attention -----------------------------------------------------------------


@dataclass
class MhsaParams:
    num_heads: int
    head_size: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def init_mhsa(rng, channels, num_heads, head_size):
    inner = num_heads * head_size
    def proj():
        return glorot(rng, (channels, inner), channels, inner)
    return MhsaParams(
        num_heads, head_size,
        proj(), zeros_param((inner,)),
        proj(), zeros_param((inner,)),
        proj(), zeros_param((inner,)),
        glorot(rng, (inner, channels), inner, channels), zeros_param((channels,)),
    )


def split_heads(x, num_heads, head_size):
    n, t = x.shape[0], x.shape[1]
    return x.reshape(n, t, num_heads, head_size).transpose((0, 2, 1, 3))


def merge_heads(x):
    n, h, t, d = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(n, t, h * d)


def mhsa_forward(x, params, return_attention=False):
    """Scaled dot-product multi-head self-attention, no mask.

    With return_attention the (n, heads, t, t) weight tensor is returned
    alongside the output (via the composed path; the plain call runs the
    fused attention op).
    """
    h, d = params.num_heads, params.head_size
    scale = 1.0 / math.sqrt(d)
    q = split_heads(T.matmul(x, params.wq) + params.bq, h, d)
    k = split_heads(T.matmul(x, params.wk) + params.bk, h, d)
    v = split_heads(T.matmul(x, params.wv) + params.bv, h, d)
    if return_attention:
        att = T.softmax(T.matmul(q * scale, k.transpose((0, 1, 3, 2))), axis=-1)
        mixed = T.matmul(att, v)
    else:
        att = None
        mixed = T.attention(q, k, v, scale)
    out = T.matmul(merge_heads(mixed), params.wo) + params.bo
    if return_attention:
        return out, att
    return out


# --- position-wise feed-forward --------------------------------------------------


@dataclass
class FfnParams:
    expand: Conv1dParams   # kernel-1 conv to the inner width
    project: Conv1dParams  # kernel-1 conv back to the channel count


def init_ffn(rng, channels, inner=None):
    inner = 4 * channels if inner is None else inner
    return FfnParams(init_conv1d(rng, channels, inner, kernel_size=1),
                     init_conv1d(rng, inner, channels, kernel_size=1))


def ffn_forward(x, params):
    hidden = T.relu(conv1d_forward(x, params.expand))
    return conv1d_forward(hidden, params.project)


# --- stacked LSTM ----------------------------------------------------------------


@dataclass
class LstmLayerParams:
    wx: Tensor  # (in, 4*hidden), gate order i, f, g, o
    wh: Tensor  # (hidden, 4*hidden)
    bias: Tensor


def init_lstm_layer(rng, d_in, hidden):
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden:2 * hidden] = 1.0  # forget-gate bias
    return LstmLayerParams(
        glorot(rng, (d_in, 4 * hidden), d_in, 4 * hidden),
        glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden),
        Tensor(b, requires_grad=True),
    )


@dataclass
class RecurrentParams:
    layers: list
    hidden_size: int
    head: DenseParams


def init_recurrent(rng, d_in, hidden, d_out, head_activation=None):
    """Two stacked LSTM layers plus an output head (applied by the caller)."""
    return RecurrentParams(
        [init_lstm_layer(rng, d_in, hidden), init_lstm_layer(rng, hidden, hidden)],
        hidden,
        init_dense(rng, hidden, d_out, activation=head_activation),
    )


def recurrent_forward(x, params):
    """Left-to-right pass through both LSTM layers.

    Returns (final hidden state (n, h), per-step outputs (n, t, h)) of the
    top layer.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"recurrent: expected non-empty (n, t, c), got {x.shape}")
    seq = x
    for layer in params.layers:
        seq = record("lstm", [seq, layer.wx, layer.wh, layer.bias],
                     hidden=params.hidden_size)
    final = T.slice_(seq, (slice(None), -1))
    return final, seq


# --- MLP -------------------------------------------------------------------------


@dataclass
class MlpParams:
    hidden1: DenseParams
    hidden2: DenseParams
    out: DenseParams


def init_mlp(rng, d_in, hidden=128, d_out=1):
    return MlpParams(
        init_dense(rng, d_in, hidden, activation="relu"),
        init_dense(rng, hidden, hidden, activation="relu"),
        init_dense(rng, hidden, d_out),
    )


def mlp_forward(x, params):
    """Flatten everything after the sample axis, two relu layers, linear logits."""
    flat = x.reshape(x.shape[0], -1)
    return dense_forward(dense_forward(dense_forward(flat, params.hidden1),
                                       params.hidden2), params.out)
