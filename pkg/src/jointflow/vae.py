"""Latent-set shape VAE: surface points -> token set -> signed distance field.

The encoder cross-attends a subsampled query set to the full point cloud
(both Fourier-embedded), refines with self-attention and projects to per-token
Gaussian moments. The decoder lifts latents back to the model width with
self-attention, and SDF values are read out by letting embedded query
locations cross-attend to the decoded tokens. The same network embeds single
fragments for the assembly branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from skimage.measure import marching_cubes
from torch import nn

from .data.shapes import TriMesh
from .errors import EmptyInput, EmptySurface
from .layers import CrossAttentionBlock, FourierEmbedder, SelfAttentionBlock

MIN_FRAGMENT_TOKENS = 4
QUERY_DOWNSAMPLE = 4


@dataclass
class VaeConfig:
    width: int = 64
    heads: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    latent_dim: int = 8
    num_frequencies: int = 6
    kl_weight: float = 1e-4

    def __post_init__(self):
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder and decoder need at least one self-attention layer")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


class Posterior(NamedTuple):
    mean: torch.Tensor
    logvar: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + torch.exp(0.5 * self.logvar) * eps

    def kl(self, mask: torch.Tensor | None = None) -> torch.Tensor:
        """KL to the standard normal, averaged over valid tokens and channels."""
        per = 0.5 * (self.mean**2 + self.logvar.exp() - 1.0 - self.logvar)
        if mask is None:
            return per.mean()
        w = mask.to(per.dtype)[..., None]
        return (per * w).sum() / (w.sum() * per.shape[-1]).clamp(min=1.0)


class ShapeVAE(nn.Module):
    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = cfg = config or VaeConfig()
        self.embedder = FourierEmbedder(cfg.num_frequencies)
        fdim = self.embedder.out_dim
        self.point_proj = nn.Linear(fdim, cfg.width)
        self.query_proj = nn.Linear(fdim, cfg.width)
        self.enc_cross = CrossAttentionBlock(cfg.width, cfg.heads)
        self.enc_layers = nn.ModuleList(SelfAttentionBlock(cfg.width, cfg.heads) for _ in range(cfg.encoder_depth))
        self.enc_norm = nn.LayerNorm(cfg.width)
        self.to_moments = nn.Linear(cfg.width, 2 * cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, cfg.width)
        self.dec_layers = nn.ModuleList(SelfAttentionBlock(cfg.width, cfg.heads) for _ in range(cfg.decoder_depth))
        self.dec_norm = nn.LayerNorm(cfg.width)
        self.dec_out = nn.Linear(cfg.width, cfg.width)
        self.sdf_proj = nn.Linear(fdim, cfg.width)
        self.sdf_cross = CrossAttentionBlock(cfg.width, cfg.heads)
        self.sdf_norm = nn.LayerNorm(cfg.width)
        self.sdf_head = nn.Linear(cfg.width, 1)
        # std of posterior means over the training set, so flow latents are ~unit scale
        self.register_buffer("latent_scale", torch.ones(()))

    # -- encoder --------------------------------------------------------------
    def encode(self, points, queries, point_mask=None, query_mask=None) -> Posterior:
        """``points (B, M, 3)``, ``queries (B, M', 3)`` -> per-query-token posterior."""
        if queries.shape[-2] == 0:
            raise EmptyInput("query set is empty")
        kv = self.point_proj(self.embedder(points))
        h = self.enc_cross(self.query_proj(self.embedder(queries)), kv, key_mask=point_mask)
        for layer in self.enc_layers:
            h = layer(h, mask=query_mask)
        mean, logvar = self.to_moments(self.enc_norm(h)).chunk(2, dim=-1)
        return Posterior(mean, logvar.clamp(-30.0, 20.0))

    # -- decoder --------------------------------------------------------------
    def decode_latents(self, z, mask=None):
        h = self.from_latent(z)
        for layer in self.dec_layers:
            h = layer(h, mask=mask)
        return self.dec_out(self.dec_norm(h))

    def decode_sdf(self, z_dec, x, mask=None):
        """SDF at ``x (B, Q, 3)`` given decoded tokens ``z_dec (B, n, width)``."""
        if x.shape[-2] == 0:
            return x.new_zeros(x.shape[:-1])
        h = self.sdf_cross(self.sdf_proj(self.embedder(x)), z_dec, key_mask=mask)
        return self.sdf_head(self.sdf_norm(h))[..., 0]

    def forward(self, points, queries, sdf_points, sample: bool = True, point_mask=None):
        post = self.encode(points, queries, point_mask=point_mask)
        z = post.sample() if sample else post.mean
        return self.decode_sdf(self.decode_latents(z), sdf_points), post

    def loss(self, points, queries, sdf_points, sdf_values, sample: bool = True):
        pred, post = self(points, queries, sdf_points, sample=sample)
        sdf_loss = torch.mean((pred - sdf_values) ** 2)
        kl = post.kl()
        return sdf_loss + self.config.kl_weight * kl, {"sdf": sdf_loss.detach(), "kl": kl.detach()}

    # -- fragments ------------------------------------------------------------
    def embed_fragments(self, points, point_mask, queries, query_mask):
        """Decoded latent tokens for a padded batch of fragments (posterior mean)."""
        post = self.encode(points, queries, point_mask=point_mask, query_mask=query_mask)
        return self.decode_latents(post.mean, mask=query_mask)


def allocate_points(areas, budget: int, min_points: int = MIN_FRAGMENT_TOKENS * QUERY_DOWNSAMPLE) -> np.ndarray:
    """Split ``budget`` points across fragments proportionally to area (largest remainder).

    Every fragment gets at least ``min_points``, so the total can exceed the
    budget by at most ``len(areas) * min_points``.
    """
    areas = np.asarray(areas, dtype=np.float64)
    if len(areas) == 0:
        return np.zeros(0, dtype=np.int64)
    share = budget * areas / areas.sum()
    alloc = np.floor(share).astype(np.int64)
    rest = budget - alloc.sum()
    order = np.argsort(-(share - alloc), kind="stable")
    alloc[order[:rest]] += 1
    return np.maximum(alloc, min_points)


def fragment_inputs(points: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Encoder inputs for one fragment whose points are stored in farthest-point order.

    The first ``m`` points form the key set and the first ``ceil(m / 4)`` (at
    least 4) the query set; prefixes of a farthest-point ordering are
    themselves farthest-point samples.
    """
    if len(points) < MIN_FRAGMENT_TOKENS * QUERY_DOWNSAMPLE:
        raise EmptyInput(f"fragment has only {len(points)} points")
    m = min(m, len(points))
    n = min(max(math.ceil(m / QUERY_DOWNSAMPLE), MIN_FRAGMENT_TOKENS), m)
    return points[:m], points[:n]


def pad_sets(arrays: list[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length ``(k_i, c)`` arrays into ``(B, K, c)`` with a validity mask."""
    k = max((len(a) for a in arrays), default=0)
    c = arrays[0].shape[-1] if arrays else 3
    out = torch.zeros(len(arrays), k, c, dtype=dtype)
    mask = torch.zeros(len(arrays), k, dtype=torch.bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = torch.as_tensor(a, dtype=dtype)
        mask[i, : len(a)] = True
    return out, mask


@torch.no_grad()
def mesh_from_sdf(vae: ShapeVAE, z_dec: torch.Tensor, grid_resolution: int = 64, chunk: int = 32768) -> TriMesh:
    """Zero level set of the decoded field over [-1, 1]^3 by marching cubes.

    ``z_dec`` is a single decoded token set ``(n, width)``.
    """
    if not 16 <= grid_resolution <= 256:
        raise ValueError("grid_resolution must be in [16, 256]")
    g = torch.linspace(-1.0, 1.0, grid_resolution, dtype=z_dec.dtype)
    grid = torch.stack(torch.meshgrid(g, g, g, indexing="ij"), dim=-1).reshape(-1, 3)
    vals = torch.cat([vae.decode_sdf(z_dec[None], grid[None, i:i + chunk])[0] for i in range(0, len(grid), chunk)])
    vol = vals.reshape((grid_resolution,) * 3).double().numpy()
    if not (vol.min() < 0.0 < vol.max()):
        raise EmptySurface("decoded field has no zero crossing on the grid")
    step = 2.0 / (grid_resolution - 1)
    verts, faces, _, _ = marching_cubes(vol, 0.0, spacing=(step,) * 3)
    # skimage winds triangles clockwise seen from the positive side; flip to outward-facing
    return TriMesh(verts - 1.0, faces[:, ::-1].copy())
