from __future__ import annotations

import torch
import torch.nn as nn

from .common import Backbone, BackboneConfig, Block, ConfigError, PatchEmbed, init_weights


class ViT(Backbone):
    """Plain vision transformer with mean-pooled tokens."""

    def __init__(self, config: BackboneConfig):
        if config.arch != "vit":
            raise ConfigError(f"ViT built from a {config.arch!r} config")
        super().__init__(config)
        d, g = config.embed_dim, config.grid_side
        self.patch_embed = PatchEmbed(config.image_side, config.patch_size, 3, d)
        self.embed_tap = self._tap("patch_embed", "tokens", (g, g))
        self.pos_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio, config.dropout) for _ in range(config.depth)
        )
        self.block_taps = nn.ModuleList(self._tap(f"blocks.{i}", "tokens", (g, g)) for i in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.norm_tap = self._tap("norm", "tokens", (g, g))
        self.pool_tap = self._tap("pre_logits", "vector")
        self.feature_dim = d
        self.apply(init_weights)

    def forward_features(self, x):
        x = self.pos_drop(self.embed_tap(self.patch_embed(x)))
        for block, tap in zip(self.blocks, self.block_taps):
            x = tap(block(x))
        return self.pool_tap(self.norm_tap(self.norm(x)).mean(dim=1))


def vit_forward(model: ViT, img: torch.Tensor):
    """``(features, logits)`` for a single ``(3, H, W)`` image."""
    if model.config.arch != "vit":
        raise ConfigError(f"vit_forward called on a {model.config.arch!r} model")
    feats, logits = model.forward_with_features(img[None])
    return feats[0], logits[0]
