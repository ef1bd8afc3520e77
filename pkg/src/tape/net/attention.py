"""Window attention modules.

All modules operate on batches of windows: processed features ``(Bw, T, N, C)``
and reference features ``(Bw, D, N, C)`` with ``N = M*M``. ``Bw`` is the
batch size times the number of windows per frame; masks are ``(nW, N, N)`` and
are broadcast over the batch.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .windows import (cyclic_shift, relative_position_index, shift_attention_mask,
                      window_partition, window_reverse)


def _add_mask(attn: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    # attn: (Bw, ..., Nq, Nk); mask: (nW, Nq, Nk)
    if mask is None:
        return attn
    nw = mask.shape[0]
    shape = attn.shape
    attn = attn.view(shape[0] // nw, nw, *shape[1:])
    extra = attn.dim() - 4
    m = mask.view(1, nw, *([1] * extra), *mask.shape[1:])
    return (attn + m).view(shape)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class RelativePositionBias(nn.Module):
    """Learnable ``(2T-1)(2M-1)^2 x heads`` table expanded to ``(heads, TN, TN)``.

    The same table and index serve every window of the block.
    """

    def __init__(self, M: int, heads: int, T: int = 1):
        super().__init__()
        self.M, self.T = M, T
        self.table = nn.Parameter(torch.zeros((2 * T - 1) * (2 * M - 1) ** 2, heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        self.register_buffer("index", relative_position_index(M, T), persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.index.shape[0]
        return self.table[self.index.reshape(-1)].view(n, n, -1).permute(2, 0, 1)


class WindowSelfAttention3D(nn.Module):
    """Joint attention over all ``T * M*M`` tokens of a spatio-temporal window."""

    def __init__(self, dim: int, heads: int, T: int, M: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.T = dim, heads, T
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias = RelativePositionBias(M, heads, T)

    def forward(self, x, mask=None, return_attn=False):
        Bw, T, N, C = x.shape
        if C != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {C}")
        if T != self.T:
            raise ValueError(f"block built for {self.T} frames, got {T}")
        L, h = T * N, self.heads
        qkv = self.qkv(x.reshape(Bw, L, C)).view(Bw, L, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.bias().unsqueeze(0)
        if mask is not None:
            mask = mask.repeat(1, T, T)
        attn = _add_mask(attn, mask).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, T, N, C)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class MultiRefWindowCrossAttention(nn.Module):
    """MR-(S)W-MCA: every processed frame attends to every reference frame
    separately inside the window.

    Returns ``(Bw, T, D, N, C)``: block ``(i, j)`` is frame ``i``'s queries
    attending over reference ``j``'s keys and values.
    """

    def __init__(self, dim: int, heads: int, M: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.bias = RelativePositionBias(M, heads)

    def forward(self, fp, fr, mask=None, return_attn=False):
        Bw, T, N, C = fp.shape
        D = fr.shape[1]
        if fr.shape[0] != Bw or fr.shape[2] != N:
            raise ValueError(f"window mismatch: processed {tuple(fp.shape)}, reference {tuple(fr.shape)}")
        if C != self.dim or fr.shape[3] != self.dim:
            raise ValueError(f"expected {self.dim} channels")
        h, dh = self.heads, C // self.heads
        q = self.q(fp).view(Bw, T, N, h, dh).permute(0, 3, 1, 2, 4)   # Bw h T N dh
        k = self.k(fr).view(Bw, D, N, h, dh).permute(0, 3, 1, 2, 4)   # Bw h D N dh
        v = self.v(fr).view(Bw, D, N, h, dh).permute(0, 3, 1, 2, 4)
        attn = torch.einsum("bhtnd,bhsmd->bhtsnm", q * self.scale, k)
        attn = attn + self.bias()[None, :, None, None]
        attn = _add_mask(attn, mask).softmax(dim=-1)
        out = torch.einsum("bhtsnm,bhsmd->btsnhd", attn, v).reshape(Bw, T, D, N, C)
        out = self.proj(out)
        return (out, attn) if return_attn else out


def canonical_reference_order(fg: torch.Tensor) -> torch.Tensor:
    """Sort the ``D`` slices of ``(Bw, T, D, N, C)`` by their sum.

    Pooling is symmetric in ``D`` but floating-point sums are not, so a fixed
    order makes the pooled result bitwise independent of the order in which
    references arrive. Slices with equal sums keep their relative order.
    """
    if fg.shape[2] == 1:
        return fg
    order = torch.sort(fg.detach().sum(dim=(3, 4)), dim=2, stable=True).indices
    return torch.gather(fg, 2, order[..., None, None].expand_as(fg))


class AttentionPool(nn.Module):
    """Pool ``(Bw, T, D, N, C)`` over ``D``: the D-mean queries the
    concatenation of all D token sequences."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, fg, mask=None, return_attn=False):
        Bw, T, D, N, C = fg.shape
        h, dh = self.heads, C // self.heads
        fg = canonical_reference_order(fg)
        avg = fg.mean(dim=2)
        cat = fg.reshape(Bw, T, D * N, C)
        q = self.q(avg).view(Bw, T, N, h, dh).transpose(2, 3)         # Bw T h N dh
        k = self.k(cat).view(Bw, T, D * N, h, dh).transpose(2, 3)
        v = self.v(cat).view(Bw, T, D * N, h, dh).transpose(2, 3)
        attn = (q * self.scale) @ k.transpose(-2, -1)                  # Bw T h N DN
        if mask is not None:
            mask = mask.repeat(1, 1, D)
        attn = _add_mask(attn, mask).softmax(dim=-1)
        out = (attn @ v).transpose(2, 3).reshape(Bw, T, N, C)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class AveragePool(nn.Module):
    """Ablation: plain mean over the reference axis."""

    def forward(self, fg, mask=None):
        return canonical_reference_order(fg).mean(dim=2)


class Swin3DBlock(nn.Module):
    """Pre-norm Swin 3D block: window self-attention spanning all frames, then MLP."""

    def __init__(self, dim: int, heads: int, T: int, M: int, shift: int = 0, mlp_ratio: float = 4.0):
        super().__init__()
        self.M, self.shift = M, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowSelfAttention3D(dim, heads, T, M)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        B, T, H, W, C = x.shape
        M = self.M
        shift = self.shift if min(H, W) > M else 0
        y = cyclic_shift(self.norm1(x), shift, shift)
        mask = shift_attention_mask(H, W, M, shift, x.device).to(x.dtype) if shift else None
        y = self.attn(window_partition(y, M), mask)
        y = cyclic_shift(window_reverse(y, M, H, W), -shift, -shift)
        x = x + y
        return x + self.mlp(self.norm2(x))


class MRSFFBlock(nn.Module):
    """One fusion block: cross-attention to each reference, pooling over
    references, then LayerNorm + MLP with a residual."""

    def __init__(self, dim: int, heads: int, M: int, shift: int = 0,
                 mlp_ratio: float = 4.0, pooling: str = "attention"):
        super().__init__()
        self.M, self.shift = M, shift
        self.norm_q = nn.LayerNorm(dim)
        self.norm_r = nn.LayerNorm(dim)
        self.cross = MultiRefWindowCrossAttention(dim, heads, M)
        if pooling == "attention":
            self.pool = AttentionPool(dim, heads)
        elif pooling == "average":
            self.pool = AveragePool()
        else:
            raise ValueError(f"unknown pooling mode {pooling!r}")
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, fp, fr):
        B, T, H, W, C = fp.shape
        M = self.M
        shift = self.shift if min(H, W) > M else 0
        q = cyclic_shift(self.norm_q(fp), shift, shift)
        r = cyclic_shift(self.norm_r(fr), shift, shift)
        mask = shift_attention_mask(H, W, M, shift, fp.device).to(fp.dtype) if shift else None
        fg = self.cross(window_partition(q, M), window_partition(r, M), mask)
        ff = self.pool(fg, mask)
        ff = cyclic_shift(window_reverse(ff, M, H, W), -shift, -shift)
        return ff + self.mlp(self.norm2(ff))


class MRSFFPair(nn.Module):
    """Unshifted then shifted MRSFF block; the result is added to the processed features."""

    def __init__(self, dim: int, heads: int, M: int, mlp_ratio: float = 4.0, pooling: str = "attention"):
        super().__init__()
        self.block1 = MRSFFBlock(dim, heads, M, 0, mlp_ratio, pooling)
        self.block2 = MRSFFBlock(dim, heads, M, M // 2, mlp_ratio, pooling)

    def forward(self, fp, fr):
        if fp.shape[2:] != fr.shape[2:]:
            raise ValueError(f"scale mismatch: processed {tuple(fp.shape)}, reference {tuple(fr.shape)}")
        return fp + self.block2(self.block1(fp, fr), fr)


class Swin3DCrossBlock(nn.Module):
    """Ablation fusion: spatio-temporal window cross-attention, all ``T*N``
    processed tokens query all ``D*N`` reference tokens jointly."""

    def __init__(self, dim: int, heads: int, M: int, shift: int = 0, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.M, self.shift, self.heads = M, shift, heads
        self.scale = (dim // heads) ** -0.5
        self.norm_q = nn.LayerNorm(dim)
        self.norm_r = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias = RelativePositionBias(M, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, fp, fr):
        B, T, H, W, C = fp.shape
        D = fr.shape[1]
        M = self.M
        shift = self.shift if min(H, W) > M else 0
        q = window_partition(cyclic_shift(self.norm_q(fp), shift, shift), M)
        r = window_partition(cyclic_shift(self.norm_r(fr), shift, shift), M)
        Bw, _, N, _ = q.shape
        h, dh = self.heads, C // self.heads
        q = self.q(q).reshape(Bw, T * N, h, dh).transpose(1, 2)
        kv = self.kv(r).reshape(Bw, D * N, 2, h, dh).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.bias().repeat(1, T, D).unsqueeze(0)
        mask = shift_attention_mask(H, W, M, shift, fp.device).to(fp.dtype).repeat(1, T, D) if shift else None
        attn = _add_mask(attn, mask).softmax(dim=-1)
        y = self.proj((attn @ v).transpose(1, 2).reshape(Bw, T, N, C))
        y = cyclic_shift(window_reverse(y, M, H, W), -shift, -shift)
        x = fp + y
        return x + self.mlp(self.norm2(x))


class Swin3DCrossPair(nn.Module):
    def __init__(self, dim: int, heads: int, M: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.block1 = Swin3DCrossBlock(dim, heads, M, 0, mlp_ratio)
        self.block2 = Swin3DCrossBlock(dim, heads, M, M // 2, mlp_ratio)

    def forward(self, fp, fr):
        if fp.shape[2:] != fr.shape[2:]:
            raise ValueError(f"scale mismatch: processed {tuple(fp.shape)}, reference {tuple(fr.shape)}")
        return self.block2(self.block1(fp, fr), fr)
