from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import Backbone, BackboneConfig, ConfigError, LayerNorm2d, init_stem_bias, init_weights


class ConvNeXtBlock(nn.Module):
    """Depthwise k x k conv, channel LayerNorm, 4x pointwise MLP, per-channel layer scale, residual."""

    def __init__(
        self, dim: int, kernel_size: int = 7, mlp_ratio: float = 4.0, dropout: float = 0.0, layer_scale: float = 1e-6
    ):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {kernel_size}")
        self.dwconv = nn.Conv2d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pwconv1 = nn.Linear(dim, int(mlp_ratio * dim))
        self.pwconv2 = nn.Linear(int(mlp_ratio * dim), dim)
        self.drop = nn.Dropout(dropout)
        self.gamma = nn.Parameter(torch.full((dim,), float(layer_scale)))

    def forward(self, x):
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.gamma * self.pwconv2(self.drop(F.gelu(self.pwconv1(self.norm(y)))))
        return x + self.drop(y).permute(0, 3, 1, 2)


def convnext_block(x: torch.Tensor, params: ConvNeXtBlock, kernel_size: int) -> torch.Tensor:
    """Apply one block to a ``(C, h, w)`` or ``(B, C, h, w)`` map."""
    if kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be odd, got {kernel_size}")
    if params.dwconv.kernel_size != (kernel_size, kernel_size):
        raise ConfigError(f"block was built with kernel {params.dwconv.kernel_size}, asked for {kernel_size}")
    squeeze = x.dim() == 3
    out = params(x[None] if squeeze else x)
    return out[0] if squeeze else out


class ConvNeXt(Backbone):
    def __init__(self, config: BackboneConfig):
        if config.arch != "convnext":
            raise ConfigError(f"ConvNeXt built from a {config.arch!r} config")
        super().__init__(config)
        dims = config.stage_dims
        config.stage_sides  # validates halving
        self.stem = nn.Sequential(
            nn.Conv2d(3, dims[0], config.patch_size, stride=config.patch_size), LayerNorm2d(dims[0])
        )
        self.stem_tap = self._tap("stem")
        self.stages = nn.ModuleList()
        for i, dim in enumerate(dims):
            layers = []
            if i > 0:
                layers += [LayerNorm2d(dims[i - 1]), nn.Conv2d(dims[i - 1], dim, 2, stride=2)]
            layers += [
                ConvNeXtBlock(dim, config.kernel_size, config.mlp_ratio, config.dropout)
                for _ in range(config.blocks_per_stage)
            ]
            self.stages.append(nn.Sequential(*layers))
        self.stage_taps = nn.ModuleList(self._tap(f"stages.{i}") for i in range(len(dims)))
        self.norm = nn.LayerNorm(dims[-1])
        self.pool_tap = self._tap("pre_logits", "vector")
        self.feature_dim = dims[-1]
        self.apply(init_weights)
        init_stem_bias(self.stem[0])

    def forward_features(self, x):
        x = self.stem_tap(self.stem(x))
        for stage, tap in zip(self.stages, self.stage_taps):
            x = tap(stage(x))
        return self.pool_tap(self.norm(x.mean(dim=(2, 3))))
