"""Top-level predictor assembling embedders, backbone, and tied decoders."""

from __future__ import annotations

from typing import Mapping

import torch
from torch import nn

from .backbone import SpatioTemporalBackbone
from .tokenizer import ModalityDecoder, ModalityEmbedder, fuse
from .types import ModelConfig, validate_config


class ConfigError(ValueError):
    """Raised when a ModelConfig violates its invariants."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in violations))


class FuturePredictor(nn.Module):
    """Multimodal masked visual sequence transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        violations = validate_config(cfg)
        if violations:
            raise ConfigError(violations)
        self.cfg = cfg
        self.layout = cfg.layout
        self.embedders = nn.ModuleDict(
            {m.name: ModalityEmbedder(m, cfg.layout) for m in cfg.modalities}
        )
        self.backbone = SpatioTemporalBackbone(
            cfg.layout, cfg.hidden_dim, cfg.num_layers, cfg.num_heads
        )
        self.decoders = nn.ModuleDict(
            {m.name: ModalityDecoder(m, cfg.layout, cfg.hidden_dim) for m in cfg.modalities}
        )

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.cfg.modalities]

    def encode(self, labels: Mapping[str, torch.Tensor],
               masks: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
        """Embed each modality, substitute mask tokens, and fuse to (B, N*L, d)."""
        per_modality = []
        for name in self.modality_names:
            mask = None if masks is None else masks[name]
            per_modality.append(self.embedders[name](labels[name], mask))
        return fuse(per_modality, self.cfg.fusion, self.cfg.hidden_dim)

    def decode_logits(self, backbone_out: torch.Tensor, name: str,
                      frames: str = "all") -> torch.Tensor:
        """Label logits for one modality from backbone output tokens.

        frames='all' decodes every frame; 'future' only the N_p future frames.
        """
        lay = self.layout
        if frames == "future":
            tokens = backbone_out[:, lay.context_frames * lay.tokens_per_frame:]
            n = lay.future_frames
        elif frames == "all":
            tokens, n = backbone_out, lay.frames
        else:
            raise ValueError(f"frames must be 'all' or 'future', got {frames!r}")
        emb = self.embedders[name]
        return self.decoders[name].logits(tokens, emb.pixel_table, frames=n)

    def forward(self, labels: Mapping[str, torch.Tensor],
                masks: Mapping[str, torch.Tensor] | None = None,
                frames: str = "all") -> dict[str, torch.Tensor]:
        """Per-modality label logits of shape (B, n, H, W, num_labels)."""
        out = self.backbone(self.encode(labels, masks))
        return {name: self.decode_logits(out, name, frames=frames)
                for name in self.modality_names}

    def pixel_distributions(self, labels, masks=None, frames: str = "all"):
        """Per-pixel label distributions (softmax over the last axis)."""
        logits = self.forward(labels, masks, frames=frames)
        return {name: torch.softmax(t, dim=-1) for name, t in logits.items()}


def build_model(cfg: ModelConfig) -> FuturePredictor:
    """Construct a predictor with deterministic, seed-controlled initialization."""
    torch.manual_seed(cfg.seed)
    return FuturePredictor(cfg)
