"""Window partitioning, cyclic shifts and the helpers around them.

Token grids are channels-last ``(B, F, H, W, C)`` tensors where ``F`` counts
frames (input frames or reference frames).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

NEG_INF = float("-inf")


def window_partition(x: torch.Tensor, M: int) -> torch.Tensor:
    """``(B, F, H, W, C)`` -> ``(B * nW, F, M*M, C)``.

    Windows are ordered row-major over the grid and tokens row-major inside a
    window.
    """
    B, Fr, H, W, C = x.shape
    if H % M or W % M:
        raise ValueError(f"grid {H}x{W} is not a multiple of window size {M}; pad first")
    x = x.view(B, Fr, H // M, M, W // M, M, C)
    x = x.permute(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(B * (H // M) * (W // M), Fr, M * M, C)


def window_reverse(windows: torch.Tensor, M: int, H: int, W: int) -> torch.Tensor:
    nw = (H // M) * (W // M)
    Bn, Fr, _, C = windows.shape
    B = Bn // nw
    x = windows.view(B, H // M, W // M, Fr, M, M, C)
    x = x.permute(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(B, Fr, H, W, C)


def cyclic_shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Token at ``(y, x)`` moves to ``((y - dy) mod H, (x - dx) mod W)``."""
    if dy == 0 and dx == 0:
        return x
    return torch.roll(x, shifts=(-dy, -dx), dims=(2, 3))


def shift_attention_mask(H: int, W: int, M: int, shift: int, device=None) -> torch.Tensor:
    """Additive ``(nW, M*M, M*M)`` mask; ``-inf`` between tokens that only meet
    because of the cyclic wrap-around."""
    labels = torch.zeros(1, 1, H, W, 1, device=device)
    cnt = 0
    for hs in (slice(0, -M), slice(-M, -shift), slice(-shift, None)):
        for ws in (slice(0, -M), slice(-M, -shift), slice(-shift, None)):
            labels[:, :, hs, ws, :] = cnt
            cnt += 1
    lw = window_partition(labels, M).reshape(-1, M * M)
    diff = lw[:, None, :] - lw[:, :, None]
    mask = torch.zeros_like(diff)
    return mask.masked_fill(diff != 0, NEG_INF)


def relative_position_index(M: int, T: int = 1) -> torch.Tensor:
    """Pairwise index into a ``(2T-1)(2M-1)^2`` bias table for ``T*M*M`` tokens."""
    coords = torch.stack(torch.meshgrid(torch.arange(T), torch.arange(M), torch.arange(M),
                                        indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0)
    rel[..., 0] += T - 1
    rel[..., 1] += M - 1
    rel[..., 2] += M - 1
    return rel[..., 0] * (2 * M - 1) ** 2 + rel[..., 1] * (2 * M - 1) + rel[..., 2]


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Reflect-pad the spatial dims of ``(N, C, H, W)`` up to ``multiple``."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < H and pw < W else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)
