"""Two-stage hierarchical tokenization, fusion, mask substitution, tied decoding.

Stage 1 embeds each discrete pixel value through a small trainable table;
stage 2 folds each P x P patch of pixel embeddings into one token. Decoding
mirrors the two stages, with the pixel-level projection sharing storage with
the stage-1 table (applied transposed).

Patch flattening order is fixed for checkpoint portability: row-major over
the P x P pixels, channels contiguous per pixel.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .types import Fusion, ModalitySpec, TokenLayout


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, N, H, W, C) -> (B, N*L, P*P*C) in token_index order."""
    b, n, h, w, c = x.shape
    gh, gw = h // patch, w // patch
    x = x.view(b, n, gh, patch, gw, patch, c)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)  # (B, N, gh, gw, P, P, C)
    return x.reshape(b, n * gh * gw, patch * patch * c)


def unpatchify(x: torch.Tensor, layout: TokenLayout, channels: int,
               frames: int | None = None) -> torch.Tensor:
    """Exact inverse of patchify: (B, n*L, P*P*C) -> (B, n, H, W, C)."""
    b = x.shape[0]
    n = layout.frames if frames is None else frames
    gh, gw, p = layout.grid_height, layout.grid_width, layout.patch
    x = x.view(b, n, gh, gw, p, p, channels)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)  # (B, n, gh, P, gw, P, C)
    return x.reshape(b, n, gh * p, gw * p, channels)


class ModalityEmbedder(nn.Module):
    """Pixel table + patch projection + learnable mask token for one modality."""

    def __init__(self, spec: ModalitySpec, layout: TokenLayout):
        super().__init__()
        self.spec = spec
        self.layout = layout
        self.pixel_table = nn.Parameter(torch.empty(spec.num_labels, spec.pixel_embed_dim))
        self.patch_projection = nn.Linear(
            layout.patch * layout.patch * spec.pixel_embed_dim, spec.token_embed_dim
        )
        self.mask_embedding = nn.Parameter(torch.zeros(spec.token_embed_dim))
        nn.init.normal_(self.pixel_table, std=0.02)
        nn.init.normal_(self.patch_projection.weight, std=0.02)
        nn.init.zeros_(self.patch_projection.bias)

    def embed(self, labels: torch.Tensor) -> torch.Tensor:
        """(B, N, H, W) integer labels -> (B, N*L, d_modality) tokens."""
        b, n, h, w = labels.shape
        if (h, w) != (self.layout.height, self.layout.width):
            raise ValueError(
                f"frames are {h}x{w} but the layout expects "
                f"{self.layout.height}x{self.layout.width}"
            )
        pixels = F.embedding(labels.reshape(b, -1), self.pixel_table)
        pixels = pixels.view(b, n, h, w, self.spec.pixel_embed_dim)
        return self.patch_projection(patchify(pixels, self.layout.patch))

    def apply_mask(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Replace masked future-frame tokens with the modality's mask embedding.

        tokens: (B, N*L, d), mask: (B, Np*L) with 1 = masked. Context tokens and
        unmasked future tokens pass through unchanged.
        """
        lay = self.layout
        if tokens.shape[1] != lay.total_tokens:
            raise ValueError(f"expected {lay.total_tokens} tokens, got {tokens.shape[1]}")
        if mask.shape[-1] != lay.future_tokens:
            raise ValueError(
                f"mask length {mask.shape[-1]} != future token count {lay.future_tokens}"
            )
        context = tokens[:, : lay.context_frames * lay.tokens_per_frame]
        future = tokens[:, lay.context_frames * lay.tokens_per_frame:]
        masked = torch.where(mask.bool().unsqueeze(-1),
                             self.mask_embedding.to(future.dtype), future)
        return torch.cat([context, masked], dim=1)

    def forward(self, labels: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        tokens = self.embed(labels)
        if mask is not None:
            tokens = self.apply_mask(tokens, mask)
        return tokens


def fuse(per_modality_tokens: list[torch.Tensor], mode: Fusion,
         hidden_dim: int) -> torch.Tensor:
    """Merge per-modality tokens at the same position into one transformer token."""
    rows = {t.shape[:-1] for t in per_modality_tokens}
    if len(rows) != 1:
        raise ValueError(f"token row counts differ across modalities: {rows}")
    if mode is Fusion.CONCAT:
        total = sum(t.shape[-1] for t in per_modality_tokens)
        if total != hidden_dim:
            raise ValueError(f"CONCAT widths sum to {total}, expected {hidden_dim}")
        return torch.cat(per_modality_tokens, dim=-1)
    if mode is Fusion.ADD:
        for t in per_modality_tokens:
            if t.shape[-1] != hidden_dim:
                raise ValueError(f"ADD requires width {hidden_dim}, got {t.shape[-1]}")
        out = per_modality_tokens[0]
        for t in per_modality_tokens[1:]:
            out = out + t
        return out
    raise ValueError(f"unknown fusion mode {mode}")


class ModalityDecoder(nn.Module):
    """Token -> per-pixel label logits; the pixel projection is the embedder's
    table transposed (same storage, no bias)."""

    def __init__(self, spec: ModalitySpec, layout: TokenLayout, hidden_dim: int):
        super().__init__()
        self.spec = spec
        self.layout = layout
        self.head = nn.Linear(hidden_dim,
                              layout.patch * layout.patch * spec.pixel_embed_dim)

    def logits(self, tokens: torch.Tensor, pixel_table: torch.Tensor,
               frames: int | None = None) -> torch.Tensor:
        """(B, n*L, d) -> (B, n, H, W, num_labels) label logits."""
        pixel_vecs = unpatchify(self.head(tokens), self.layout,
                                self.spec.pixel_embed_dim, frames=frames)
        return F.linear(pixel_vecs, pixel_table)

    def forward(self, tokens: torch.Tensor, pixel_table: torch.Tensor,
                frames: int | None = None) -> torch.Tensor:
        """Per-pixel label distributions (softmax of the logits)."""
        return torch.softmax(self.logits(tokens, pixel_table, frames=frames), dim=-1)
