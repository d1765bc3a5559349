"""Multi-axis attention: window (local) then grid (dilated global) attention.

Partitions operate on channels-last maps ``(B, H, W, C)``.  With window
size ``P`` on an ``H x W`` map the window partition yields ``(H/P)(W/P)``
groups of ``P*P`` tokens; the grid partition yields ``P*P`` groups of
``(H/P)(W/P)`` tokens, each gathering the token at one fixed offset from
every window (stride ``P``).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import Backbone, BackboneConfig, ConfigError, LayerNorm2d, Mlp, MultiHeadSelfAttention, init_stem_bias, init_weights


def _check(h, w, p):
    if h % p or w % p:
        raise ConfigError(f"feature map {h}x{w} not divisible by window size {p}")


def window_partition(x: torch.Tensor, p: int) -> torch.Tensor:
    b, h, w, c = x.shape
    _check(h, w, p)
    x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // p) * (w // p), p * p, c)


def window_reverse(windows: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.reshape(-1, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, h, w, c)


def grid_partition(x: torch.Tensor, p: int) -> torch.Tensor:
    b, h, w, c = x.shape
    _check(h, w, p)
    x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b * p * p, (h // p) * (w // p), c)


def grid_reverse(groups: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    c = groups.shape[-1]
    x = groups.reshape(-1, p, p, h // p, w // p, c).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(-1, h, w, c)


class MBConv(nn.Module):
    """Inverted bottleneck with a 3x3 depthwise conv; residual."""

    def __init__(self, dim: int, expand: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * expand)
        self.norm = LayerNorm2d(dim)
        self.conv1_1x1 = nn.Conv2d(dim, hidden, 1)
        self.conv2_kxk = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.conv3_1x1 = nn.Conv2d(hidden, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        y = F.gelu(self.conv1_1x1(self.norm(x)))
        y = F.gelu(self.conv2_kxk(y))
        return x + self.drop(self.conv3_1x1(y))


class PartitionAttention(nn.Module):
    """Attention + MLP applied inside each window or grid group."""

    def __init__(self, dim, heads, window_size, mode, mlp_ratio=4.0, dropout=0.0):
        super().__init__()
        if mode not in ("window", "grid"):
            raise ConfigError(f"unknown partition mode {mode!r}")
        self.mode = mode
        self.window_size = window_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, dropout)

    def forward(self, x):
        # x: (B, H, W, C)
        _, h, w, _ = x.shape
        p = self.window_size
        part, rev = (window_partition, window_reverse) if self.mode == "window" else (grid_partition, grid_reverse)
        t = part(x, p)
        t = t + self.attn(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return rev(t, p, h, w)


class MaxViTBlock(nn.Module):
    def __init__(self, dim, heads, window_size, mlp_ratio=4.0, dropout=0.0):
        super().__init__()
        self.conv = MBConv(dim, mlp_ratio, dropout)
        self.attn_block = PartitionAttention(dim, heads, window_size, "window", mlp_ratio, dropout)
        self.attn_grid = PartitionAttention(dim, heads, window_size, "grid", mlp_ratio, dropout)

    def forward(self, x):
        # x: (B, C, H, W)
        x = self.conv(x).permute(0, 2, 3, 1)
        x = self.attn_grid(self.attn_block(x))
        return x.permute(0, 3, 1, 2)


def maxvit_block(x: torch.Tensor, window_size: int, params: MaxViTBlock) -> torch.Tensor:
    """Apply one block to a ``(C, h, w)`` or ``(B, C, h, w)`` map."""
    if params.attn_block.window_size != window_size:
        raise ConfigError(f"block was built with window {params.attn_block.window_size}, asked for {window_size}")
    _check(x.shape[-2], x.shape[-1], window_size)
    squeeze = x.dim() == 3
    out = params(x[None] if squeeze else x)
    return out[0] if squeeze else out


class MaxViT(Backbone):
    """Conv stem, then stages of MaxViT blocks with stride-2 downsampling between them."""

    def __init__(self, config: BackboneConfig):
        if config.arch != "maxvit":
            raise ConfigError(f"MaxViT built from a {config.arch!r} config")
        super().__init__(config)
        dims = config.stage_dims
        d0 = dims[0]
        self.stem = nn.ModuleDict(
            {
                "conv1": nn.Conv2d(3, d0, 3, stride=config.patch_size, padding=1),
                "conv2": nn.Conv2d(d0, d0, 3, padding=1),
            }
        )
        self.stem_tap = self._tap("stem.conv1")
        self.downsample = nn.ModuleList()
        self.stages = nn.ModuleList()
        taps = []
        for i, dim in enumerate(dims):
            if i == 0:
                self.downsample.append(nn.Identity())
            else:
                self.downsample.append(
                    nn.Sequential(LayerNorm2d(dims[i - 1]), nn.Conv2d(dims[i - 1], dim, 2, stride=2))
                )
            heads = config.heads * 2**i
            self.stages.append(
                nn.ModuleList(
                    MaxViTBlock(dim, heads, config.window_size, config.mlp_ratio, config.dropout)
                    for _ in range(config.blocks_per_stage)
                )
            )
            taps.append(nn.ModuleList(self._tap(f"stages.{i}.blocks.{j}") for j in range(config.blocks_per_stage)))
        self.stage_taps = nn.ModuleList(taps)
        self.norm = nn.LayerNorm(dims[-1])
        self.pool_tap = self._tap("pre_logits", "vector")
        self.feature_dim = dims[-1]
        self.apply(init_weights)
        init_stem_bias(self.stem["conv1"])

    def forward_features(self, x):
        x = self.stem_tap(self.stem["conv1"](x))
        x = self.stem["conv2"](F.gelu(x))
        for down, blocks, taps in zip(self.downsample, self.stages, self.stage_taps):
            x = down(x)
            for block, tap in zip(blocks, taps):
                x = tap(block(x))
        return self.pool_tap(self.norm(x.mean(dim=(2, 3))))
