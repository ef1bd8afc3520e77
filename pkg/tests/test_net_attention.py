import numpy as np
import pytest
import torch

from tape.net.attention import (AttentionPool, AveragePool, MRSFFPair, MultiRefWindowCrossAttention,
                                Swin3DBlock, Swin3DCrossPair, WindowSelfAttention3D)
from tape.net.model import zero_fusion_outputs
from tape.net.windows import (cyclic_shift, relative_position_index, shift_attention_mask, window_partition,
                              window_reverse)

from oracles import as_f64, mr_wmca_oracle, pool_oracle


def _random_case(rng):
    T, D = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    M = int(rng.integers(1, 5))
    heads = int(rng.choice([1, 2]))
    C = heads * int(rng.integers(1, 5))
    Bw = int(rng.integers(1, 3))
    return T, D, M, C, heads, Bw


def test_mr_wmca_matches_loops():
    rng = np.random.default_rng(0)
    for i in range(100):
        T, D, M, C, heads, Bw = _random_case(rng)
        torch.manual_seed(i)
        mod = MultiRefWindowCrossAttention(C, heads, M)
        fp = torch.randn(Bw, T, M * M, C)
        fr = torch.randn(Bw, D, M * M, C)
        got = mod(fp, fr)
        assert got.shape == (Bw, T, D, M * M, C)
        assert np.abs(as_f64(got) - mr_wmca_oracle(mod, fp, fr)).max() < 1e-6


def test_attention_pool_matches_loops():
    rng = np.random.default_rng(1)
    for i in range(100):
        T, D, M, C, heads, Bw = _random_case(rng)
        torch.manual_seed(i)
        mod = AttentionPool(C, heads)
        fg = torch.randn(Bw, T, D, M * M, C)
        got = mod(fg)
        assert got.shape == (Bw, T, M * M, C)
        assert np.abs(as_f64(got) - pool_oracle(mod, fg)).max() < 1e-6


def test_softmax_rows_sum_to_one():
    torch.manual_seed(0)
    M, C, T, D = 4, 8, 2, 3
    cross = MultiRefWindowCrossAttention(C, 2, M)
    pool = AttentionPool(C, 2)
    sa = WindowSelfAttention3D(C, 2, T, M)
    H = W = 8
    mask = shift_attention_mask(H, W, M, M // 2)
    nw = mask.shape[0]
    fp = torch.randn(nw, T, M * M, C)
    fr = torch.randn(nw, D, M * M, C)
    for m in (None, mask):
        _, a1 = cross(fp, fr, m, return_attn=True)
        _, a2 = pool(torch.randn(nw, T, D, M * M, C), m, return_attn=True)
        _, a3 = sa(fp, m, return_attn=True)
        for a in (a1, a2, a3):
            assert torch.all(torch.isfinite(a))
            assert (a.sum(-1) - 1).abs().max() < 1e-6


def test_single_reference_pool_reduces_to_self_attention_on_it():
    torch.manual_seed(0)
    pool = AttentionPool(8, 2)
    fg = torch.randn(3, 2, 1, 4, 8)
    assert np.abs(as_f64(pool(fg)) - pool_oracle(pool, fg)).max() < 1e-6


def test_average_pool():
    fg = torch.randn(2, 1, 3, 4, 8)
    assert torch.allclose(AveragePool()(fg), fg.mean(2))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_attention_pool_permutation_of_references_is_exact(dtype):
    torch.manual_seed(3)
    pool = AttentionPool(8, 2).to(dtype)
    fg = torch.randn(4, 2, 5, 16, 8, dtype=dtype)
    fg[:, :, 3] = fg[:, :, 1]  # duplicated reference
    base = pool(fg)
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        perm = torch.randperm(5, generator=g)
        assert torch.equal(pool(fg[:, :, perm]), base)
        assert torch.equal(AveragePool()(fg[:, :, perm]), AveragePool()(fg))


def test_fusion_pair_ignores_reference_order():
    torch.manual_seed(0)
    pair = MRSFFPair(8, 2, 4)
    fp, fr = torch.randn(1, 2, 8, 8, 8), torch.randn(1, 4, 8, 8, 8)
    base = pair(fp, fr)
    for perm in ([3, 2, 1, 0], [1, 3, 0, 2]):
        assert torch.equal(pair(fp, fr[:, perm]), base)


def test_mrsff_pair_zero_projection_is_identity():
    torch.manual_seed(0)
    for pooling in ("attention", "average"):
        pair = MRSFFPair(8, 2, 2, pooling=pooling)
        zero_fusion_outputs(pair)
        fp = torch.randn(1, 2, 4, 4, 8)
        fr = torch.randn(1, 3, 4, 4, 8)
        assert torch.equal(pair(fp, fr), fp)


def test_cross_attention_single_key_returns_values():
    # with a single reference token every query sees the same value
    torch.manual_seed(0)
    mod = MultiRefWindowCrossAttention(4, 1, 1)
    fp, fr = torch.randn(2, 3, 1, 4), torch.randn(2, 2, 1, 4)
    out = mod(fp, fr)
    expected = mod.proj(mod.v(fr))[:, None].expand(2, 3, 2, 1, 4)
    assert torch.allclose(out, expected, atol=1e-6)


def test_block_shapes_and_fusion_variants():
    torch.manual_seed(0)
    fp = torch.randn(2, 3, 8, 8, 8)
    fr = torch.randn(2, 2, 8, 8, 8)
    assert Swin3DBlock(8, 2, 3, 4, shift=2)(fp).shape == fp.shape
    assert MRSFFPair(8, 2, 4)(fp, fr).shape == fp.shape
    assert Swin3DCrossPair(8, 2, 4)(fp, fr).shape == fp.shape
    with pytest.raises(ValueError):
        MRSFFPair(8, 2, 4)(fp, torch.randn(2, 2, 4, 4, 8))


def test_relative_bias_index_range():
    for M, T in ((2, 1), (3, 2), (4, 3)):
        idx = relative_position_index(M, T)
        assert idx.shape == (T * M * M, T * M * M)
        assert idx.min() == 0 and idx.max() == (2 * T - 1) * (2 * M - 1) ** 2 - 1
        assert torch.all(idx.diagonal() == idx[0, 0])
        assert torch.equal(idx + idx.T, torch.full_like(idx, 2 * int(idx[0, 0])))


# --- windows


@pytest.mark.parametrize("M,H,W", [(1, 3, 2), (2, 4, 6), (4, 8, 8), (3, 9, 6)])
def test_partition_reverse_roundtrip(M, H, W):
    x = torch.randn(2, 3, H, W, 5)
    w = window_partition(x, M)
    assert w.shape == (2 * (H // M) * (W // M), 3, M * M, 5)
    assert torch.equal(window_reverse(w, M, H, W), x)


def test_partition_token_order():
    H, W, M = 4, 4, 2
    x = torch.arange(H * W, dtype=torch.float32).view(1, 1, H, W, 1)
    w = window_partition(x, M)[:, 0, :, 0]
    assert w[0].tolist() == [0, 1, 4, 5]
    assert w[1].tolist() == [2, 3, 6, 7]
    with pytest.raises(ValueError):
        window_partition(torch.zeros(1, 1, 5, 4, 1), 2)


def test_shift_roundtrip_and_direction():
    x = torch.randn(1, 2, 6, 8, 3)
    assert torch.equal(cyclic_shift(cyclic_shift(x, 2, 3), -2, -3), x)
    y = cyclic_shift(x, 1, 1)
    assert torch.equal(y[:, :, 0, 0], x[:, :, 1, 1])


def test_shift_mask_blocks_wraparound_only():
    H = W = 8
    M, s = 4, 2
    mask = shift_attention_mask(H, W, M, s)
    assert mask.shape == (4, 16, 16)
    assert torch.all(mask[0] == 0)  # top-left window holds no wrapped tokens
    # oracle: tokens meet iff they lie in the same region of the shifted grid
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    region = ((ys >= H - M).astype(int) + (ys >= H - s)) * 3 + (xs >= W - M) + (xs >= W - s)
    lab = window_partition(torch.tensor(region, dtype=torch.float32).view(1, 1, H, W, 1), M)[:, 0, :, 0]
    same = lab[:, :, None] == lab[:, None, :]
    assert torch.equal(mask == 0, same)
