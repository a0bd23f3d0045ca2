import math

import numpy as np
import pytest

from _gradcheck import check_params_grad
from ttae import fusion as F
from ttae import layers as L
from ttae import tensor as T
from ttae.tensor import Tape, Tensor


RNG = lambda seed=0: np.random.default_rng(seed)


def _affinity_args(p, direction):
    proj = p.to_local if direction == "local" else p.to_global
    return proj.wq, proj.bq, proj.wk, proj.bk


def test_affinity_zero_queries_uniform():
    rng = RNG(0)
    p = F.init_cross_attention(rng, channels=3, num_heads=2, head_size=4)
    p.to_local.wq.data[:] = 0.0
    a = rng.normal(size=(2, 6, 3)).astype(np.float32)
    b = rng.normal(size=(2, 6, 3)).astype(np.float32)
    att = F.affinity(Tensor(a), Tensor(b), *_affinity_args(p, "local"),
                     p.num_heads, p.head_size, 0.5)
    assert att.shape == (2, 2, 6, 6)
    assert np.allclose(att.numpy(), 1.0 / 6.0, atol=1e-6)


def test_affinity_single_step_is_one():
    rng = RNG(1)
    p = F.init_cross_attention(rng, channels=2, num_heads=1, head_size=3)
    a = Tensor(rng.normal(size=(3, 1, 2)).astype(np.float32))
    b = Tensor(rng.normal(size=(3, 1, 2)).astype(np.float32))
    att = F.affinity(a, b, *_affinity_args(p, "local"), 1, 3, 1.0)
    assert np.allclose(att.numpy(), 1.0)


def test_affinity_matches_unrolled_scalar_oracle():
    rng = RNG(2)
    p = F.init_cross_attention(rng, channels=1, num_heads=1, head_size=1,
                               scale_mode="channels")
    local = rng.normal(size=(1, 2, 1)).astype(np.float32)
    globl = rng.normal(size=(1, 2, 1)).astype(np.float32)
    att = F.affinity(Tensor(local), Tensor(globl), *_affinity_args(p, "local"),
                     1, 1, 1.0).numpy()[0, 0]

    q = local[0] @ p.to_local.wq.numpy()  # biases are zero at init
    k = globl[0] @ p.to_local.wk.numpy()
    scores = np.array([[q[i, 0] * k[j, 0] for j in range(2)] for i in range(2)])
    expect = np.exp(scores - scores.max(axis=1, keepdims=True))
    expect /= expect.sum(axis=1, keepdims=True)
    assert np.allclose(att, expect, atol=1e-6)


def test_affinity_shape_mismatch():
    p = F.init_cross_attention(RNG(0), channels=2)
    with pytest.raises(T.ShapeError):
        F.affinity(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 4, 2))),
                   *_affinity_args(p, "local"), p.num_heads, p.head_size, 1.0)


def test_fuse_local_zero_value_projection_is_bitwise_identity():
    rng = RNG(3)
    p = F.init_cross_attention(rng, channels=3, num_heads=2, head_size=4)
    p.to_local.wv.data[:] = 0.0
    p.to_local.bv.data[:] = 0.0
    p.to_local.out.data[:] = rng.normal(size=p.to_local.out.shape)  # irrelevant
    local = Tensor(rng.normal(size=(2, 5, 3)).astype(np.float32))
    globl = Tensor(rng.normal(size=(2, 5, 3)).astype(np.float32))
    out = F.fuse_local(local, globl, p)
    assert out.numpy().tobytes() == local.numpy().tobytes()


def test_fuse_local_zero_other_branch_is_identity():
    rng = RNG(4)
    p = F.init_cross_attention(rng, channels=3, num_heads=1, head_size=4)
    p.to_local.out.data[:] = rng.normal(size=p.to_local.out.shape)
    local = Tensor(rng.normal(size=(1, 4, 3)).astype(np.float32))
    globl = Tensor(np.zeros((1, 4, 3), dtype=np.float32))
    out = F.fuse_local(local, globl, p)
    assert np.allclose(out.numpy(), local.numpy(), atol=1e-7)


def test_fuse_global_zero_value_projection_is_identity():
    rng = RNG(5)
    p = F.init_cross_attention(rng, channels=2, num_heads=1, head_size=3)
    p.to_global.wv.data[:] = 0.0
    local = Tensor(rng.normal(size=(2, 4, 2)).astype(np.float32))
    globl = Tensor(rng.normal(size=(2, 4, 2)).astype(np.float32))
    out = F.fuse_global(globl, local, p)
    assert out.numpy().tobytes() == globl.numpy().tobytes()


def test_fuse_directions_symmetric_under_parameter_swap():
    rng = RNG(6)
    p = F.init_cross_attention(rng, channels=3, num_heads=2, head_size=4)
    for name in ("wq", "bq", "wk", "bk", "wv", "bv", "out"):
        getattr(p.to_global, name).data[:] = getattr(p.to_local, name).numpy()
    p.to_local.out.data[:] = rng.normal(size=p.to_local.out.shape)
    p.to_global.out.data[:] = p.to_local.out.numpy()
    x = Tensor(rng.normal(size=(2, 5, 3)).astype(np.float32))
    a = F.fuse_local(x, x, p)
    b = F.fuse_global(x, x, p)
    assert np.array_equal(a.numpy(), b.numpy())


def _fuse_oracle(updated, other, proj, scale):
    """Literal single-head composition of the affinity + residual update."""
    q = updated[0] @ proj.wq.numpy() + proj.bq.numpy()
    k = other[0] @ proj.wk.numpy() + proj.bk.numpy()
    v = other[0] @ proj.wv.numpy() + proj.bv.numpy()
    scores = (q @ k.T) * scale
    att = np.exp(scores - scores.max(axis=1, keepdims=True))
    att /= att.sum(axis=1, keepdims=True)
    return updated[0] + (att @ v) @ proj.out.numpy()


def test_fuse_local_matches_composed_equation_oracle():
    # literal reading: single head, unit out projection, 1/sqrt(c) scaling
    rng = RNG(7)
    p = F.init_cross_attention(rng, channels=1, num_heads=1, head_size=1,
                               scale_mode="channels")
    p.to_local.out.data[:] = 1.0
    local = rng.normal(size=(1, 2, 1)).astype(np.float32)
    globl = rng.normal(size=(1, 2, 1)).astype(np.float32)
    out = F.fuse_local(Tensor(local), Tensor(globl), p).numpy()
    expect = _fuse_oracle(local, globl, p.to_local, 1.0)
    assert np.allclose(out[0], expect, atol=1e-6)


def test_fuse_global_matches_composed_equation_oracle():
    rng = RNG(8)
    p = F.init_cross_attention(rng, channels=1, num_heads=1, head_size=1,
                               scale_mode="channels")
    p.to_global.out.data[:] = 1.0
    local = rng.normal(size=(1, 2, 1)).astype(np.float32)
    globl = rng.normal(size=(1, 2, 1)).astype(np.float32)
    out = F.fuse_global(Tensor(globl), Tensor(local), p).numpy()
    expect = _fuse_oracle(globl, local, p.to_global, 1.0)
    assert np.allclose(out[0], expect, atol=1e-6)


def test_fused_attention_path_matches_composed_affinity_path():
    rng = RNG(40)
    p = F.init_cross_attention(rng, channels=3, num_heads=2, head_size=4)
    p.to_local.out.data[:] = rng.normal(size=p.to_local.out.shape)
    local = Tensor(rng.normal(size=(2, 6, 3)).astype(np.float32))
    globl = Tensor(rng.normal(size=(2, 6, 3)).astype(np.float32))
    fused = F.fuse_local(local, globl, p).numpy()

    proj = p.to_local
    scale = 1.0 / math.sqrt(p.head_size)
    att = F.affinity(local, globl, proj.wq, proj.bq, proj.wk, proj.bk,
                     p.num_heads, p.head_size, scale)
    v = L.split_heads(T.matmul(globl, proj.wv) + proj.bv,
                      p.num_heads, p.head_size)
    mixed = L.merge_heads(T.matmul(att, v))
    composed = (local + T.matmul(mixed, proj.out)).numpy()
    assert np.allclose(fused, composed, atol=1e-6)


def test_fuse_multihead_matches_generalized_oracle():
    rng = RNG(9)
    c, h, d = 2, 2, 3
    p = F.init_cross_attention(rng, channels=c, num_heads=h, head_size=d)
    p.to_local.out.data[:] = rng.normal(size=(h * d, c)).astype(np.float32)
    local = rng.normal(size=(1, 4, c)).astype(np.float32)
    globl = rng.normal(size=(1, 4, c)).astype(np.float32)
    out = F.fuse_local(Tensor(local), Tensor(globl), p).numpy()

    proj = p.to_local
    q = (local[0] @ proj.wq.numpy() + proj.bq.numpy()).reshape(4, h, d)
    k = (globl[0] @ proj.wk.numpy() + proj.bk.numpy()).reshape(4, h, d)
    v = (globl[0] @ proj.wv.numpy() + proj.bv.numpy()).reshape(4, h, d)
    mixed = np.zeros((4, h, d))
    for head in range(h):
        scores = (q[:, head, :] @ k[:, head, :].T) / math.sqrt(d)
        att = np.exp(scores - scores.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        mixed[:, head, :] = att @ v[:, head, :]
    expect = local[0] + mixed.reshape(4, h * d) @ proj.out.numpy()
    assert np.allclose(out[0], expect, atol=1e-5)


# --- blocks --------------------------------------------------------------------

def test_block_dilation_pattern():
    assert [F.block_dilation(i) for i in range(4)] == [1, 4, 16, 16]


def test_stack_blocks_use_dilations_one_and_four():
    stack = F.init_fusion_stack(RNG(10), channels=3, num_blocks=2,
                                num_heads=1, head_size=2)
    assert stack.blocks[0].conv.dilation == 1
    assert stack.blocks[1].conv.dilation == 4


def test_block_preserves_shape():
    rng = RNG(11)
    block = F.init_fusion_block(rng, channels=3, dilation=1, num_heads=2,
                                head_size=4)
    x = Tensor(rng.normal(size=(2, 6, 3)).astype(np.float32))
    state = F.block_forward(F.BranchState(x, x), block)
    assert state.local.shape == (2, 6, 3)
    assert state.global_.shape == (2, 6, 3)


def test_block_with_zero_fusion_values_degenerates_to_parallel_branches():
    rng = RNG(12)
    block = F.init_fusion_block(rng, channels=3, dilation=2, num_heads=2,
                                head_size=4)
    block.cross.to_local.wv.data[:] = 0.0
    block.cross.to_local.bv.data[:] = 0.0
    block.cross.to_global.wv.data[:] = 0.0
    block.cross.to_global.bv.data[:] = 0.0
    x = Tensor(RNG(13).normal(size=(2, 6, 3)).astype(np.float32))
    state = F.block_forward(F.BranchState(x, x), block)
    assert np.array_equal(state.local.numpy(),
                          F.conv_branch_forward(x, block).numpy())
    assert np.array_equal(state.global_.numpy(),
                          F.transformer_branch_forward(x, block).numpy())


def test_affinity_rows_sum_to_one_in_both_directions_every_block():
    rng = RNG(14)
    stack = F.init_fusion_stack(rng, channels=2, num_blocks=2, num_heads=2,
                                head_size=3)
    state = F.BranchState(
        Tensor(rng.normal(size=(2, 7, 2)).astype(np.float32)),
        Tensor(rng.normal(size=(2, 7, 2)).astype(np.float32)),
    )
    for block in stack.blocks:
        local_feat = F.conv_branch_forward(state.local, block)
        global_feat = F.transformer_branch_forward(state.global_, block)
        scale = 1.0 / math.sqrt(block.cross.head_size)
        for updated, other, proj in (
            (local_feat, global_feat, block.cross.to_local),
            (global_feat, local_feat, block.cross.to_global),
        ):
            att = F.affinity(updated, other, proj.wq, proj.bq, proj.wk,
                             proj.bk, block.cross.num_heads,
                             block.cross.head_size, scale).numpy()
            assert np.all(att >= 0)
            assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-6)
        state = F.block_forward(state, block)


# --- stack -----------------------------------------------------------------------

def test_stack_output_shape_matches_prototype():
    rng = RNG(15)
    for blocks in (1, 2, 3):
        stack = F.init_fusion_stack(rng, channels=4, num_blocks=blocks,
                                    num_heads=1, head_size=2)
        x = Tensor(rng.normal(size=(2, 8, 4)).astype(np.float32))
        assert F.stack_forward(x, stack).shape == (2, 8, 4)


def test_stack_single_block_matches_composed_sublayers():
    rng = RNG(16)
    stack = F.init_fusion_stack(rng, channels=3, num_blocks=1, num_heads=1,
                                head_size=2)
    x = Tensor(rng.normal(size=(2, 6, 3)).astype(np.float32))
    out = F.stack_forward(x, stack).numpy()

    state = F.block_forward(F.BranchState(x, x), stack.blocks[0])
    both = np.concatenate([state.local.numpy(), state.global_.numpy()], axis=-1)
    expect = both @ stack.head.weight.numpy() + stack.head.bias.numpy()
    assert np.allclose(out, expect, atol=1e-6)


def test_stack_runs_forward_backward_on_default_config():
    rng = RNG(17)
    stack = F.init_fusion_stack(rng, channels=5, num_blocks=2, num_heads=3,
                                head_size=8)
    x = Tensor(rng.normal(size=(2, 24, 5)).astype(np.float32))
    params = L.trainable(stack)
    with Tape() as tape:
        loss = T.square(F.stack_forward(x, stack)).mean()
        grads = tape.backward(loss, params=params)
    assert np.isfinite(loss.item())
    for p in params:
        assert np.all(np.isfinite(grads[p].numpy()))


def test_stack_deterministic():
    def run():
        rng = RNG(18)
        stack = F.init_fusion_stack(rng, channels=2, num_blocks=2,
                                    num_heads=1, head_size=2)
        x = Tensor(rng.normal(size=(2, 8, 2)).astype(np.float32))
        return F.stack_forward(x, stack).numpy().tobytes()

    assert run() == run()


def test_stack_gradients_match_finite_differences_tiny_config():
    rng = RNG(19)
    stack = F.init_fusion_stack(rng, channels=2, num_blocks=2, num_heads=1,
                                head_size=4)
    # randomize the zero-initialized out projections so their grads are generic
    for block in stack.blocks:
        block.cross.to_local.out.data[:] = 0.1 * rng.normal(size=(4, 2))
        block.cross.to_global.out.data[:] = 0.1 * rng.normal(size=(4, 2))
    x = Tensor(rng.normal(size=(2, 8, 2)).astype(np.float32))
    params = L.trainable(stack)
    subset = params[:: max(1, len(params) // 8)]  # spot-check a spread of tensors
    check_params_grad(lambda: T.square(F.stack_forward(x, stack)).mean(), subset)


# --- ablation branch paths ---------------------------------------------------------

def test_single_branch_and_sequential_paths_match_references():
    rng = RNG(20)
    stack = F.init_fusion_stack(rng, channels=3, num_blocks=2, num_heads=1,
                                head_size=2)
    x = Tensor(rng.normal(size=(2, 8, 3)).astype(np.float32))

    ref = x
    for block in stack.blocks:
        ref = F.conv_branch_forward(ref, block)
    assert np.array_equal(F.conv_only_forward(x, stack.blocks).numpy(),
                          ref.numpy())

    ref = x
    for block in stack.blocks:
        ref = F.transformer_branch_forward(ref, block)
    assert np.array_equal(F.transformer_only_forward(x, stack.blocks).numpy(),
                          ref.numpy())

    seq = F.sequential_forward(x, stack.blocks).numpy()
    ref = F.transformer_only_forward(F.conv_only_forward(x, stack.blocks),
                                     stack.blocks).numpy()
    assert np.array_equal(seq, ref)
