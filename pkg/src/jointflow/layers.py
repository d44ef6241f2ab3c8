"""Transformer building blocks shared by the VAE, both flow branches and the adapters."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class FourierEmbedder(nn.Module):
    """``x -> [x, sin(f_k x), cos(f_k x)]`` with ``f_k = base_scale * pi * 2^k``."""

    def __init__(self, num_frequencies: int = 8, base_scale: float = 1.0):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.base_scale = base_scale
        freqs = base_scale * math.pi * 2.0 ** torch.arange(num_frequencies, dtype=torch.float64)
        self.register_buffer("freqs", freqs, persistent=False)

    @property
    def out_dim(self) -> int:
        return 3 + 6 * self.num_frequencies

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        proj = (x[..., None] * self.freqs.to(x.dtype)).flatten(-2)
        return torch.cat([x, proj.sin(), proj.cos()], dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    """Sinusoidal features of ``t`` in [0, 1] (scaled by 1000 as in diffusion models)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[..., None] * freqs
    return torch.cat([args.cos(), args.sin()], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.dim))


class Attention(nn.Module):
    """Multi-head attention, ``x`` queries attending to ``context`` (defaults to ``x``).

    ``key_mask`` is boolean ``(B, K)``, True for valid keys. A query with no
    valid key receives a zero update.
    """

    def __init__(self, dim: int, heads: int, context_dim: int | None = None, zero_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        context_dim = dim if context_dim is None else context_dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        if m == 0:
            return torch.zeros_like(x)
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, m, 2, h, d // h).permute(2, 0, 3, 1, 4)
        empty = attn_mask = None
        if key_mask is not None:
            empty = ~key_mask.any(dim=1)
            # rows without any valid key attend everywhere and are zeroed afterwards
            attn_mask = (key_mask | empty[:, None])[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        y = y.transpose(1, 2).reshape(b, n, d)
        y = self.out(y)
        if empty is not None and bool(empty.any()):
            y = y.masked_fill(empty[:, None, None], 0.0)
        return y


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), key_mask=mask)
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention (queries ``x``, keys/values ``context``) + MLP."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None, zero_out: bool = False,
                 feedforward: bool = True):
        super().__init__()
        context_dim = dim if context_dim is None else context_dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(context_dim)
        self.attn = Attention(dim, heads, context_dim, zero_out=zero_out)
        self.ff = None
        if feedforward:
            self.norm2 = nn.LayerNorm(dim)
            self.ff = FeedForward(dim)

    def forward(self, x, context, key_mask=None):
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), key_mask=key_mask)
        if self.ff is not None:
            x = x + self.ff(self.norm2(x))
        return x


class FlowBlock(nn.Module):
    """Flow-branch layer: self-attention, cross-attention to the condition tokens, MLP.

    The time embedding is added to the token stream before the block.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_c = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, temb, cond, mask=None):
        x = x + temb[:, None, :]
        x = x + self.attn(self.norm1(x), key_mask=mask)
        x = x + self.cross(self.norm_c(x), cond)
        return x + self.ff(self.norm2(x))


class SkipStack(nn.Module):
    """``depth`` flow blocks with U-Net style long skips.

    The output of layer ``k`` in the first half is concatenated with the
    input of its mirror layer ``depth - 1 - k`` and projected back to width.
    Layers are exposed one at a time so two stacks can be interleaved.
    """

    def __init__(self, dim: int, heads: int, depth: int):
        super().__init__()
        self.depth = depth
        self.blocks = nn.ModuleList(FlowBlock(dim, heads) for _ in range(depth))
        self.skip_proj = nn.ModuleDict(
            {str(k): nn.Linear(2 * dim, dim) for k in range(depth - depth // 2, depth)}
        )

    def layer(self, k: int, h, temb, cond, mask, skips: list):
        if str(k) in self.skip_proj:
            h = self.skip_proj[str(k)](torch.cat([h, skips.pop()], dim=-1))
        h = self.blocks[k](h, temb, cond, mask=mask)
        if k < self.depth // 2:
            skips.append(h)
        return h

    def forward(self, h, temb, cond, mask=None):
        skips, hidden = [], []
        for k in range(self.depth):
            h = self.layer(k, h, temb, cond, mask, skips)
            hidden.append(h)
        return h, hidden


def masked_mean(x: torch.Tensor, index: torch.Tensor, mask: torch.Tensor, groups: int) -> torch.Tensor:
    """Mean of token rows ``x (B, M, d)`` per group id ``index (B, M)``; padded tokens ignored.

    Returns ``(B, groups, d)``; empty groups are zero.
    """
    b, m, d = x.shape
    w = mask.to(x.dtype)
    idx = index.clamp(min=0, max=groups - 1)
    sums = x.new_zeros(b, groups, d).scatter_add(1, idx[..., None].expand(b, m, d), x * w[..., None])
    counts = x.new_zeros(b, groups).scatter_add(1, idx, w)
    return sums / counts.clamp(min=1.0)[..., None]


def gather_groups(values: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Broadcast per-group rows ``values (B, G, d)`` to tokens ``index (B, M)``."""
    b, m = index.shape
    return values.gather(1, index.clamp(min=0)[..., None].expand(b, m, values.shape[-1]))


__all__ = [
    "Attention",
    "CrossAttentionBlock",
    "FeedForward",
    "FlowBlock",
    "FourierEmbedder",
    "SelfAttentionBlock",
    "SkipStack",
    "TimeEmbedding",
    "gather_groups",
    "masked_mean",
    "timestep_embedding",
]
