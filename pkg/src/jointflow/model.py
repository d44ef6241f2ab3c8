"""The joint model: shape VAE, condition encoder, both flow branches and the adapters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .adapter import AdapterLayer
from .assembly import AssemblyBranch, AssemblyConfig, FragmentTokens
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import WidthMismatch
from .generation import ConditionEncoder, GenerationBranch, GenerationConfig
from .vae import ShapeVAE, VaeConfig, mesh_from_sdf


@dataclass
class ModelConfig:
    vae: VaeConfig = field(default_factory=VaeConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    simultaneous_adapter: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vae=VaeConfig(**d.get("vae", {})),
            assembly=AssemblyConfig(**d.get("assembly", {})),
            generation=GenerationConfig(**d.get("generation", {})),
            simultaneous_adapter=bool(d.get("simultaneous_adapter", False)),
        )


class JointModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        if cfg.assembly.width != cfg.generation.width:
            raise WidthMismatch("assembly and generation widths must match for the adapters")
        if cfg.assembly.depth != cfg.generation.depth:
            raise ValueError("branches must have equal depth so adapters pair layers one to one")
        self.vae = ShapeVAE(cfg.vae)
        self.cond_encoder = ConditionEncoder(cfg.assembly.width)
        self.assembly = AssemblyBranch(cfg.assembly, feature_dim=cfg.vae.width)
        self.generation = GenerationBranch(cfg.generation, latent_dim=cfg.vae.latent_dim)
        self.adapters = nn.ModuleList(
            AdapterLayer(cfg.assembly.width, cfg.assembly.heads, k, cfg.simultaneous_adapter)
            for k in range(cfg.assembly.depth)
        )

    # -- encoders -------------------------------------------------------------
    def fragment_features(self, tokens: FragmentTokens, bucket: int = 8) -> torch.Tensor:
        """Decoded VAE tokens for every fragment, gathered into the assembly token layout.

        Fragments are embedded in groups of similar size so padding stays small;
        results do not depend on the grouping beyond float rounding.
        """
        n_keys = tokens.point_mask.sum(1)
        n_queries = tokens.query_mask.sum(1)
        out = tokens.queries.new_zeros(*tokens.queries.shape[:2], self.vae.config.width)
        order = torch.argsort(n_keys, stable=True)
        for i in range(0, len(order), bucket):
            idx = order[i:i + bucket]
            m, q = int(n_keys[idx].max()), int(n_queries[idx].max())
            out[idx, :q] = self.vae.embed_fragments(
                tokens.points[idx, :m], tokens.point_mask[idx, :m], tokens.queries[idx, :q], tokens.query_mask[idx, :q]
            )
        return tokens.gather_tokens(out)

    def encode_condition(self, images, drop=None):
        return self.cond_encoder(images, drop)

    def encode_shapes(self, points, queries) -> torch.Tensor:
        """Normalized generation targets: posterior means divided by the latent scale."""
        return self.vae.encode(points, queries).mean / self.vae.latent_scale

    # -- flows ----------------------------------------------------------------
    def assemble(self, features, tokens, rot, trans, t, cond):
        rv, tv, _ = self.assembly(features, tokens, rot, trans, t, cond)
        return rv, tv

    def joint(self, features, tokens, rot, trans, z_t, t, cond, t_gen=None):
        """Both branches in lockstep with an adapter exchange after every layer pair.

        ``t_gen`` lets the generation branch sit at a different time value
        (independent step grids); it defaults to ``t``.
        """
        asm, gen = self.assembly, self.generation
        h_a, temb_a = asm.embed(features, tokens, rot, trans, t)
        h_g, temb_g = gen.embed(z_t, t if t_gen is None else t_gen)
        skips_a, skips_g = [], []
        for k in range(asm.depth):
            h_a = asm.stack.layer(k, h_a, temb_a, cond, tokens.tok_mask, skips_a)
            h_g = gen.stack.layer(k, h_g, temb_g, cond, None, skips_g)
            h_g, h_a = self.adapters[k](h_g, h_a, asm_mask=tokens.tok_mask)
        rv, tv = asm.head(h_a, tokens)
        return rv, tv, gen.head(h_g)

    # -- decoding -------------------------------------------------------------
    def decode_mesh(self, z_norm: torch.Tensor, grid_resolution: int = 64):
        z_dec = self.vae.decode_latents(z_norm[None] * self.vae.latent_scale)[0]
        return mesh_from_sdf(self.vae, z_dec, grid_resolution)

    # -- persistence ----------------------------------------------------------
    def save(self, path, meta: dict | None = None, extra: dict[str, torch.Tensor] | None = None):
        tensors = {f"model.{k}": v for k, v in self.state_dict().items()}
        tensors.update(extra or {})
        save_checkpoint(path, tensors, {"config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path):
        """Returns ``(model, meta, extra_tensors)``."""
        tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["config"]))
        state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
        model.load_state_dict(state)
        extra = {k: v for k, v in tensors.items() if not k.startswith("model.")}
        return model, meta, extra


def count_parameters(module: nn.Module) -> int:
    return int(sum(np.prod(p.shape) for p in module.parameters()))
