"""Generation branch: rectified-flow velocity over whole-shape latent tokens."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import BadImageShape, ShapeMismatch
from .layers import SkipStack, TimeEmbedding

IMAGE_RES = 64


@dataclass
class GenerationConfig:
    width: int = 64
    heads: int = 4
    depth: int = 6
    latent_tokens: int = 64
    guidance: float = 3.0

    def to_dict(self) -> dict:
        return asdict(self)


class ConditionEncoder(nn.Module):
    """Four stride-2 convolutions: a 64x64 silhouette becomes 4x4 = 16 tokens."""

    def __init__(self, width: int = 64):
        super().__init__()
        chans = [1, 16, 32, 64, width]
        layers = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if i < len(chans) - 2:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        self.pos = nn.Parameter(0.02 * torch.randn(16, width))
        self.width = width

    @property
    def num_tokens(self) -> int:
        return 16

    def forward(self, images, drop=None):
        """``images (B, 64, 64)`` in [0, 1]; ``drop (B,)`` bool gives all-zero (null) tokens."""
        if images.dim() != 3 or tuple(images.shape[-2:]) != (IMAGE_RES, IMAGE_RES):
            raise BadImageShape(f"expected (B, {IMAGE_RES}, {IMAGE_RES}), got {tuple(images.shape)}")
        feats = self.net(2.0 * images[:, None] - 1.0)  # (B, width, 4, 4)
        tokens = feats.flatten(2).transpose(1, 2) + self.pos
        if drop is not None:
            tokens = torch.where(drop[:, None, None], torch.zeros_like(tokens), tokens)
        return tokens

    def null(self, batch: int, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(batch, self.num_tokens, self.width, dtype=dtype)


class GenerationBranch(nn.Module):
    """Set transformer over latent tokens ``z_t (B, n, c)`` predicting ``v_z``.

    No positional embedding: the latent set is unordered, so the branch is
    permutation-equivariant over tokens.
    """

    def __init__(self, config: GenerationConfig | None = None, latent_dim: int = 8):
        super().__init__()
        self.config = cfg = config or GenerationConfig()
        self.latent_dim = latent_dim
        self.in_proj = nn.Linear(latent_dim, cfg.width)
        self.time = TimeEmbedding(cfg.width)
        self.stack = SkipStack(cfg.width, cfg.heads, cfg.depth)
        self.out_norm = nn.LayerNorm(cfg.width)
        self.out = nn.Linear(cfg.width, latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def depth(self) -> int:
        return self.config.depth

    def embed(self, z_t, t):
        return self.in_proj(z_t), self.time(t)

    def head(self, h):
        return self.out(self.out_norm(h))

    def forward(self, z_t, t, cond):
        h, temb = self.embed(z_t, t)
        h, hidden = self.stack(h, temb, cond)
        return self.head(h), hidden


def generation_loss(v_z, z0, z1):
    """Mean squared error between ``v_z`` and the straight-line velocity ``z0 - z1``."""
    if v_z.shape != z0.shape or z0.shape != z1.shape:
        raise ShapeMismatch(f"{tuple(v_z.shape)}, {tuple(z0.shape)}, {tuple(z1.shape)}")
    return torch.mean((v_z - (z0 - z1)) ** 2)


def cfg_combine(v_cond, v_uncond, guidance_scale: float):
    if guidance_scale < 0:
        raise ValueError("guidance scale must be non-negative")
    return v_uncond + guidance_scale * (v_cond - v_uncond)
