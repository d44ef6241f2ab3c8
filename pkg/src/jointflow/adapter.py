"""Joint Adapter: per-layer bidirectional cross-attention between the two branches."""
from __future__ import annotations

from torch import nn

from .errors import WidthMismatch
from .layers import CrossAttentionBlock


class AdapterLayer(nn.Module):
    """Residual cross-attention in both directions, output projections zero at init.

    With ``simultaneous=False`` the assembly stream attends to the already
    updated generation stream; ``True`` uses the pre-update states for both.
    """

    def __init__(self, width: int, heads: int, layer_index: int = 0, simultaneous: bool = False):
        super().__init__()
        self.width = width
        self.layer_index = layer_index
        self.simultaneous = simultaneous
        self.gen_from_asm = CrossAttentionBlock(width, heads, zero_out=True, feedforward=False)
        self.asm_from_gen = CrossAttentionBlock(width, heads, zero_out=True, feedforward=False)

    def forward(self, h_gen, h_asm, asm_mask=None):
        if h_gen.shape[-1] != self.width or h_asm.shape[-1] != self.width:
            raise WidthMismatch(f"adapter width {self.width}, got {h_gen.shape[-1]} and {h_asm.shape[-1]}")
        new_gen = self.gen_from_asm(h_gen, h_asm, key_mask=asm_mask)
        new_asm = self.asm_from_gen(h_asm, h_gen if self.simultaneous else new_gen)
        return new_gen, new_asm

    bridge = forward

    def scale_output(self, factor: float):
        """Multiply both output projections by ``factor`` (used to probe the residual path)."""
        for block in (self.gen_from_asm, self.asm_from_gen):
            block.attn.out.weight.data.mul_(factor)
            block.attn.out.bias.data.mul_(factor)
