"""Reference backbones sharing one contract: logits, named taps, gradients."""

from __future__ import annotations

import torch
import torch.nn as nn

from .archive import SchemaMismatchError, load_external_backbone, load_params, save_backbone, save_params
from .common import (
    ARCHS,
    Backbone,
    BackboneConfig,
    Block,
    ConfigError,
    MultiHeadSelfAttention,
    PatchEmbed,
    Tap,
    mhsa,
    patch_embed,
    patchify,
)
from .convnext import ConvNeXt, ConvNeXtBlock, convnext_block
from .maxvit import (
    MaxViT,
    MaxViTBlock,
    grid_partition,
    grid_reverse,
    maxvit_block,
    window_partition,
    window_reverse,
)
from .tnt import TNT, tnt_forward
from .vit import ViT, vit_forward

_BUILDERS = {"vit": ViT, "tnt": TNT, "convnext": ConvNeXt, "maxvit": MaxViT}

# desk-scale defaults for 64x64 inputs
TOY_CONFIGS = {
    "vit": dict(arch="vit", image_side=64, patch_size=8, embed_dim=64, depth=2, heads=4),
    "tnt": dict(arch="tnt", image_side=64, patch_size=8, embed_dim=64, depth=2, heads=4, inner_patch_size=4,
                inner_dim=16, inner_heads=2),
    "convnext": dict(arch="convnext", image_side=64, patch_size=4, embed_dim=32, depth=2, heads=1, kernel_size=7),
    "maxvit": dict(arch="maxvit", image_side=64, patch_size=2, embed_dim=32, depth=4, heads=2, window_size=4),
}


def toy_config(arch: str, **overrides) -> BackboneConfig:
    if arch not in TOY_CONFIGS:
        raise ConfigError(f"unknown arch {arch!r}")
    return BackboneConfig(**{**TOY_CONFIGS[arch], **overrides})


def build_backbone(config: BackboneConfig, seed: int | None = None) -> Backbone:
    if seed is not None:
        torch.manual_seed(seed)
    return _BUILDERS[config.arch](config)


def replace_head(model: Backbone, num_classes: int = 3, zero_init: bool = False) -> Backbone:
    """Attach a fresh ``feature_dim -> num_classes`` linear head, discarding any old one."""
    if not model.feature_dim:
        raise ConfigError(f"{type(model).__name__} does not declare a pooled feature dimension")
    head = nn.Linear(model.feature_dim, num_classes)
    if zero_init:
        nn.init.zeros_(head.weight)
    else:
        nn.init.trunc_normal_(head.weight, std=0.02, a=-0.04, b=0.04)
    nn.init.zeros_(head.bias)
    head.to(next(model.parameters()).dtype)
    model.head = head
    return model


__all__ = [n for n in dir() if not n.startswith("_")]
