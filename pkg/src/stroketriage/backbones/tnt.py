from __future__ import annotations

import torch
import torch.nn as nn

from .common import Backbone, BackboneConfig, Block, ConfigError, PatchEmbed, init_weights, patchify


class WordEmbed(nn.Module):
    """Split each patch into sub-patches ("words") and project them."""

    def __init__(self, patch_size: int, inner_patch_size: int, word_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.inner = inner_patch_size
        self.words = (patch_size // inner_patch_size) ** 2
        self.proj = nn.Linear(3 * inner_patch_size**2, word_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.words, word_dim))

    def forward(self, img):
        b, c = img.shape[:2]
        p, q = self.patch_size, self.inner
        patches = patchify(img, p)  # (B, N, C*p*p)
        n = patches.shape[1]
        patches = patches.reshape(b * n, c, p, p)
        words = patchify(patches, q)  # (B*N, W, C*q*q)
        return self.proj(words) + self.pos_embed


class TNTBlock(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        wd, w = config.word_dim, config.words_per_patch
        self.inner = Block(wd, config.inner_heads, config.mlp_ratio, config.dropout)
        self.inner_norm = nn.LayerNorm(w * wd)
        self.inner_to_outer = nn.Linear(w * wd, config.embed_dim)
        self.outer = Block(config.embed_dim, config.heads, config.mlp_ratio, config.dropout)

    def forward(self, words, sentences):
        b, n, _ = sentences.shape
        words = self.inner(words)
        sentences = sentences + self.inner_to_outer(self.inner_norm(words.reshape(b, n, -1)))
        return words, self.outer(sentences)


class TNT(Backbone):
    """Transformer-in-transformer: inner attention over words, outer over sentences."""

    def __init__(self, config: BackboneConfig):
        if config.arch != "tnt":
            raise ConfigError(f"TNT built from a {config.arch!r} config")
        super().__init__(config)
        d, g = config.embed_dim, config.grid_side
        self.patch_embed = PatchEmbed(config.image_side, config.patch_size, 3, d)
        self.word_embed = WordEmbed(config.patch_size, config.inner_patch_size, config.word_dim)
        self.embed_tap = self._tap("patch_embed", "tokens", (g, g))
        self.pos_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(TNTBlock(config) for _ in range(config.depth))
        self.block_taps = nn.ModuleList(self._tap(f"blocks.{i}", "tokens", (g, g)) for i in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.norm_tap = self._tap("norm", "tokens", (g, g))
        self.pool_tap = self._tap("pre_logits", "vector")
        self.feature_dim = d
        self.apply(init_weights)

    def token_shapes(self):
        """``(sentences, words per sentence)``."""
        return self.config.num_patches, self.config.words_per_patch

    def forward_features(self, x):
        words = self.word_embed(x)
        sentences = self.pos_drop(self.embed_tap(self.patch_embed(x)))
        for block, tap in zip(self.blocks, self.block_taps):
            words, sentences = block(words, sentences)
            sentences = tap(sentences)
        return self.pool_tap(self.norm_tap(self.norm(sentences)).mean(dim=1))


def tnt_forward(model: TNT, img: torch.Tensor):
    if model.config.arch != "tnt":
        raise ConfigError(f"tnt_forward called on a {model.config.arch!r} model")
    feats, logits = model.forward_with_features(img[None])
    return feats[0], logits[0]
