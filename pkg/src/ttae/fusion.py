"""Parallel local/global feature blocks fused by bidirectional cross-attention.

Each block runs one causal dilated convolution layer (the local branch) next
to one transformer block (the global branch) on tensors of identical shape.
The branches then exchange information both ways: the local branch queries
the global branch's keys/values and adds the result through a residual
connection, and the global branch does the mirror image against the local
branch. Stacked blocks feed each fused pair into the next block's branches;
a final channel-concat plus dense head reduces the two branches back to the
series shape.

The cross-attention is multi-head with per-head 1/sqrt(head_size) scaling by
default; `scale_mode="channels"` switches to 1/sqrt(channels) scaling for a
literal single-head reading of the update rule. Both value-path output
projections are zero-initialized and bias-free, so a freshly built block
starts as an exact pair of independent branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (
    Conv1dParams,
    DenseParams,
    FfnParams,
    LayerNormParams,
    MhsaParams,
    Tensor,
    conv1d_forward,
    dense_forward,
    ffn_forward,
    glorot,
    init_conv1d,
    init_dense,
    init_ffn,
    init_layer_norm,
    init_mhsa,
    merge_heads,
    mhsa_forward,
    sample_norm_forward,
    split_heads,
    zeros_param,
)


@dataclass
class AttentionProjections:
    """Projections for one fusion direction: queries from the branch being
    updated, keys/values from the other branch, and a bias-free output
    projection back to the channel count."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    out: Tensor


@dataclass
class CrossAttentionParams:
    num_heads: int
    head_size: int
    scale_mode: str  # "head" -> 1/sqrt(head_size), "channels" -> 1/sqrt(c)
    to_local: AttentionProjections   # local queries against global keys/values
    to_global: AttentionProjections  # global queries against local keys/values


def init_cross_attention(rng, channels, num_heads=3, head_size=64,
                         scale_mode="head"):
    inner = num_heads * head_size

    def direction():
        return AttentionProjections(
            glorot(rng, (channels, inner), channels, inner), zeros_param((inner,)),
            glorot(rng, (channels, inner), channels, inner), zeros_param((inner,)),
            glorot(rng, (channels, inner), channels, inner), zeros_param((inner,)),
            zeros_param((inner, channels)),  # zero out-proj: pure residual at init
        )

    return CrossAttentionParams(num_heads, head_size, scale_mode,
                                direction(), direction())


def _scale(params, channels):
    if params.scale_mode == "channels":
        return 1.0 / math.sqrt(channels)
    return 1.0 / math.sqrt(params.head_size)


def affinity(queries_from, keys_from, q_proj, q_bias, k_proj, k_bias,
             num_heads, head_size, scale):
    """Attention weights of one fusion direction: (n, heads, t, t), softmax
    over the key axis. Row r is how strongly the updated branch's step r
    attends to each step of the other branch."""
    if queries_from.shape != keys_from.shape:
        raise T.ShapeError(
            f"affinity: branch shapes differ {queries_from.shape} vs {keys_from.shape}"
        )
    q = split_heads(T.matmul(queries_from, q_proj) + q_bias, num_heads, head_size)
    k = split_heads(T.matmul(keys_from, k_proj) + k_bias, num_heads, head_size)
    scores = T.matmul(q * scale, k.transpose((0, 1, 3, 2)))
    return T.softmax(scores, axis=-1)


def _fuse(updated, other, proj, num_heads, head_size, scale):
    if updated.shape != other.shape:
        raise T.ShapeError(
            f"fuse: branch shapes differ {updated.shape} vs {other.shape}"
        )
    q = split_heads(T.matmul(updated, proj.wq) + proj.bq, num_heads, head_size)
    k = split_heads(T.matmul(other, proj.wk) + proj.bk, num_heads, head_size)
    v = split_heads(T.matmul(other, proj.wv) + proj.bv, num_heads, head_size)
    mixed = merge_heads(T.attention(q, k, v, scale))
    return updated + T.matmul(mixed, proj.out)


def fuse_local(local, global_, params):
    """Residual update of the local branch from global keys/values."""
    scale = _scale(params, local.shape[-1])
    return _fuse(local, global_, params.to_local,
                 params.num_heads, params.head_size, scale)


def fuse_global(global_, local, params):
    """Residual update of the global branch from local keys/values."""
    scale = _scale(params, global_.shape[-1])
    return _fuse(global_, local, params.to_global,
                 params.num_heads, params.head_size, scale)


@dataclass
class BranchState:
    local: Tensor
    global_: Tensor


@dataclass
class FusionBlockParams:
    conv: Conv1dParams          # causal dilated conv, filters == channels
    conv_norm: LayerNormParams
    attn: MhsaParams
    attn_norm: LayerNormParams
    ffn: FfnParams
    ffn_norm: LayerNormParams
    cross: CrossAttentionParams


def block_dilation(index):
    """Dilation per block position: 1, 4, then 16 for every deeper block."""
    return min(4 ** index, 16)


def init_fusion_block(rng, channels, dilation, num_heads=3, head_size=64,
                      scale_mode="head"):
    return FusionBlockParams(
        conv=init_conv1d(rng, channels, channels, kernel_size=4,
                         dilation=dilation, causal=True),
        conv_norm=init_layer_norm(channels),
        attn=init_mhsa(rng, channels, num_heads, head_size),
        attn_norm=init_layer_norm(channels),
        ffn=init_ffn(rng, channels),
        ffn_norm=init_layer_norm(channels),
        cross=init_cross_attention(rng, channels, num_heads, head_size, scale_mode),
    )


def conv_branch_forward(x, block):
    """One local-branch step: causal dilated conv with post normalization.

    Normalization is per sample over the whole (time, channels) slab; the
    per-step channel variant would zero out univariate branches.
    """
    return sample_norm_forward(conv1d_forward(x, block.conv), block.conv_norm)


def transformer_branch_forward(x, block):
    """One global-branch step: self-attention and feed-forward sublayers,
    each with a residual connection and post normalization."""
    attended = sample_norm_forward(x + mhsa_forward(x, block.attn), block.attn_norm)
    return sample_norm_forward(attended + ffn_forward(attended, block.ffn),
                               block.ffn_norm)


def block_forward(state, block):
    """Advance both branches one block and fuse them in both directions.

    The fused outputs become the next block's branch inputs.
    """
    local_feat = conv_branch_forward(state.local, block)
    global_feat = transformer_branch_forward(state.global_, block)
    if local_feat.shape != global_feat.shape:
        raise T.ShapeError(
            f"fusion block: branch shapes diverged {local_feat.shape} vs {global_feat.shape}"
        )
    return BranchState(
        local=fuse_local(local_feat, global_feat, block.cross),
        global_=fuse_global(global_feat, local_feat, block.cross),
    )


@dataclass
class FusionStackParams:
    blocks: list
    head: DenseParams  # maps concatenated branches (2c) back to c


def init_fusion_stack(rng, channels, num_blocks=2, num_heads=3, head_size=64,
                      scale_mode="head"):
    if num_blocks < 1:
        raise ValueError("fusion stack needs at least one block")
    blocks = [
        init_fusion_block(rng, channels, block_dilation(i), num_heads,
                          head_size, scale_mode)
        for i in range(num_blocks)
    ]
    return FusionStackParams(blocks, init_dense(rng, 2 * channels, channels))


def stack_forward(x, params):
    """Run the prototype through every block, both branches initialized to
    it, then concat the branches over channels and map back to c."""
    state = BranchState(local=x, global_=x)
    for block in params.blocks:
        state = block_forward(state, block)
    both = T.concat([state.local, state.global_], axis=-1)
    return dense_forward(both, params.head)


# single-branch and sequential ablation paths share the block parameters

def conv_only_forward(x, blocks):
    for block in blocks:
        x = conv_branch_forward(x, block)
    return x


def transformer_only_forward(x, blocks):
    for block in blocks:
        x = transformer_branch_forward(x, block)
    return x


def sequential_forward(x, blocks):
    """All conv layers first, then all transformer blocks, no fusion."""
    return transformer_only_forward(conv_only_forward(x, blocks), blocks)
