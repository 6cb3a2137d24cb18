"""Transformer building blocks shared by the tokenizers and fusion models.

Attention supports a per-position validity mask: invalid keys are excluded
from every softmax (via a large negative score, which underflows to exact
zero weight after normalization) and outputs at invalid query positions
are zeroed, so nothing valid ever depends on values hiding behind the
mask. With ``valid=None`` the blocks are ordinary pre-norm ViT blocks.
"""

from __future__ import annotations

import torch
from torch import nn

MASK_SCORE = -1e9


def sincos_pos_embed(ht: int, wt: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    """Fixed 2-d sin-cos positional embeddings, (ht*wt, dim), row-major.

    Half the channels encode the row index, half the column index, each as
    interleaved sin/cos at geometric frequencies; works for any lattice
    shape, so the same module handles windows of different sizes. dim must
    be a multiple of 4.
    """
    if dim % 4:
        raise ValueError(f"dim must be a multiple of 4, got {dim}")
    half = dim // 2

    def embed_1d(n, d):
        omega = torch.arange(d // 2, dtype=torch.float64) / (d // 2)
        omega = 1.0 / (10000.0**omega)
        pos = torch.arange(n, dtype=torch.float64)
        angles = pos[:, None] * omega[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=1)

    rows = embed_1d(ht, half)  # (ht, half)
    cols = embed_1d(wt, half)  # (wt, half)
    out = torch.cat(
        [
            rows[:, None, :].expand(ht, wt, half),
            cols[None, :, :].expand(ht, wt, half),
        ],
        dim=2,
    ).reshape(ht * wt, dim)
    return out.to(device=device, dtype=dtype if dtype is not None else torch.float32)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * hidden_mult)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * hidden_mult, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} must be divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if valid is not None:
            key_bias = (~valid).to(x.dtype) * MASK_SCORE
            scores = scores + key_bias[:, None, None, :]
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        if valid is not None:
            out = out * valid.to(x.dtype)[:, :, None]
        return out


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, hidden_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, hidden_mult)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), valid)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """p-by-p patchification as a strided conv, returning a token sequence."""

    def __init__(self, in_channels: int, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.conv = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)

    def forward(self, x: torch.Tensor):
        # x: (B, C, H, W) -> tokens (B, Ht*Wt, D), lattice shape (Ht, Wt)
        z = self.conv(x)
        b, d, ht, wt = z.shape
        return z.flatten(2).transpose(1, 2), (ht, wt)


class PixelHead(nn.Module):
    """Inverse of PatchEmbed: one linear from token dim to p*p pixel blocks."""

    def __init__(self, dim: int, out_channels: int, patch: int):
        super().__init__()
        self.patch = patch
        self.out_channels = out_channels
        self.linear = nn.Linear(dim, out_channels * patch * patch)

    def forward(self, tokens: torch.Tensor, lattice: tuple[int, int]) -> torch.Tensor:
        ht, wt = lattice
        b = tokens.shape[0]
        p = self.patch
        x = self.linear(tokens).reshape(b, ht, wt, self.out_channels, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, self.out_channels, ht * p, wt * p)
        return x
