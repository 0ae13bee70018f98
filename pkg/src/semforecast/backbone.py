"""Bidirectional transformer with decomposed temporal/spatial attention.

Each Pre-LN block applies, in order: temporal attention (tokens at the same
spatial position across the N frames), spatial attention (tokens within one
frame), and a GELU MLP, each with a residual connection. Attention is full
within its group; there is no causal mask and no final post-norm.
"""

from __future__ import annotations

import torch
from torch import nn

from .types import TokenLayout

LAYERNORM_EPS = 1e-5


class GroupedSelfAttention(nn.Module):
    """Multi-head self-attention over the second-to-last axis of (B, G, S, d)."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, g, s, d = x.shape
        shape = (b, g, s, self.num_heads, self.head_dim)
        q = self.query(x).view(shape)
        k = self.key(x).view(shape)
        v = self.value(x).view(shape)
        attn = torch.einsum("bgqhd,bgkhd->bghqk", q, k) * self.scale
        attn = attn.softmax(dim=-1)
        ctx = torch.einsum("bghqk,bgkhd->bgqhd", attn, v)
        return self.out(ctx.reshape(b, g, s, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """temporal attention -> spatial attention -> MLP, all Pre-LN residual."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm_temporal = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.attn_temporal = GroupedSelfAttention(dim, num_heads)
        self.norm_spatial = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.attn_spatial = GroupedSelfAttention(dim, num_heads)
        self.norm_mlp = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.mlp = Mlp(dim)

    def forward(self, x: torch.Tensor, enable_temporal: bool = True,
                enable_spatial: bool = True, enable_mlp: bool = True) -> torch.Tensor:
        # x: (B, N, L, d)
        if enable_temporal:
            h = self.norm_temporal(x).transpose(1, 2)  # (B, L, N, d)
            x = x + self.attn_temporal(h).transpose(1, 2)
        if enable_spatial:
            x = x + self.attn_spatial(self.norm_spatial(x))
        if enable_mlp:
            x = x + self.mlp(self.norm_mlp(x))
        return x


class SpatioTemporalBackbone(nn.Module):
    """Position embedding plus a stack of decomposed-attention blocks."""

    def __init__(self, layout: TokenLayout, dim: int, num_layers: int, num_heads: int):
        super().__init__()
        self.layout = layout
        self.position_table = nn.Parameter(torch.empty(layout.total_tokens, dim))
        nn.init.normal_(self.position_table, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, num_heads) for _ in range(num_layers))

    def forward(self, tokens: torch.Tensor, enable_temporal: bool = True,
                enable_spatial: bool = True, enable_mlp: bool = True) -> torch.Tensor:
        """(B, N*L, d) fused tokens -> (B, N*L, d) output embeddings."""
        lay = self.layout
        if tokens.shape[1] != lay.total_tokens:
            raise ValueError(
                f"expected {lay.total_tokens} tokens per item, got {tokens.shape[1]}"
            )
        x = tokens + self.position_table.to(tokens.dtype)
        x = x.view(tokens.shape[0], lay.frames, lay.tokens_per_frame, -1)
        for block in self.blocks:
            x = block(x, enable_temporal=enable_temporal,
                      enable_spatial=enable_spatial, enable_mlp=enable_mlp)
        return x.reshape(tokens.shape[0], lay.total_tokens, -1)
