from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("vit", "tnt", "convnext", "maxvit")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture hyperparameters.

    For the hierarchical archs (``convnext``, ``maxvit``) ``depth`` counts
    stages, ``patch_size`` is the stem stride and channel width doubles per
    stage starting from ``embed_dim``.
    """

    arch: str = "vit"
    image_side: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    inner_patch_size: int = 4
    inner_dim: Optional[int] = None
    inner_heads: int = 2
    window_size: int = 4
    kernel_size: int = 7
    blocks_per_stage: int = 1
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.image_side % self.patch_size:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} does not divide embed_dim {self.embed_dim}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.arch == "tnt":
            if self.patch_size % self.inner_patch_size:
                raise ConfigError(
                    f"patch_size {self.patch_size} not divisible by inner_patch_size {self.inner_patch_size}"
                )
            if self.word_dim % self.inner_heads:
                raise ConfigError(f"inner_heads {self.inner_heads} does not divide inner_dim {self.word_dim}")
        if self.arch == "convnext" and self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.arch == "maxvit":
            for i, side in enumerate(self.stage_sides):
                if side % self.window_size:
                    raise ConfigError(
                        f"stage {i} feature side {side} not divisible by window_size {self.window_size}"
                    )

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def word_dim(self) -> int:
        return self.inner_dim if self.inner_dim is not None else max(self.embed_dim // 4, self.inner_heads)

    @property
    def words_per_patch(self) -> int:
        return (self.patch_size // self.inner_patch_size) ** 2

    @property
    def stage_sides(self) -> list[int]:
        sides, side = [], self.grid_side
        for i in range(self.depth):
            if i > 0:
                if side % 2:
                    raise ConfigError(f"stage {i} cannot halve odd feature side {side}")
                side //= 2
            sides.append(side)
        return sides

    @property
    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)


def init_weights(module: nn.Module):
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def init_stem_bias(conv: nn.Conv2d, std: float = 0.5):
    """Random stem bias.

    A zero-bias linear stem followed by a per-pixel norm maps every flat patch
    of intensity v to the same vector for all v > 0, hiding contrast between
    uniform regions until the bias has been learned.
    """
    nn.init.normal_(conv.bias, std=std)


class Tap(nn.Module):
    """Identity node that can expose its activation as a spatial map.

    While capturing, the incoming tensor is reshaped to ``(B, C, h, w)``,
    marked as requiring grad and fed back into the graph, so gradients of
    any downstream score with respect to it are available via autograd.
    """

    def __init__(self, name: str, layout: str = "spatial", grid: Optional[tuple[int, int]] = None):
        super().__init__()
        if layout not in ("spatial", "tokens", "vector"):
            raise ConfigError(f"unknown tap layout {layout!r}")
        self.name = name
        self.layout = layout
        self.grid = grid
        self.capturing = False
        self.activation: Optional[torch.Tensor] = None

    @property
    def spatial(self) -> bool:
        return self.layout != "vector"

    def forward(self, x):
        if not self.capturing:
            return x
        if self.layout == "tokens":
            b, n, d = x.shape
            h, w = self.grid
            a = x.transpose(1, 2).reshape(b, d, h, w)
        else:
            a = x
        if not a.requires_grad:
            a = a.detach().requires_grad_(True)
        self.activation = a
        if self.layout == "tokens":
            return a.reshape(b, d, n).transpose(1, 2)
        return a

    def extra_repr(self):
        return f"name={self.name!r}, layout={self.layout}"


class Backbone(nn.Module):
    """Feature extractor with a replaceable linear head and a tap registry."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.head: Optional[nn.Linear] = None
        self.feature_dim: Optional[int] = None
        self._taps: list[Tap] = []

    def _tap(self, name: str, layout: str = "spatial", grid=None) -> Tap:
        tap = Tap(name, layout, grid)
        self._taps.append(tap)
        return tap

    @property
    def layer_registry(self) -> "OrderedDict[str, Tap]":
        return OrderedDict((t.name, t) for t in self._taps)

    def rename_layers(self, mapping: dict[str, str]):
        names = {t.name for t in self._taps}
        unknown = set(mapping) - names
        if unknown:
            raise KeyError(f"registry has no layers named {sorted(unknown)}; available: {sorted(names)}")
        for t in self._taps:
            t.name = mapping.get(t.name, t.name)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[1]

    def forward_with_features(self, x: torch.Tensor):
        feats = self.forward_features(x)
        if self.head is None:
            raise RuntimeError("backbone has no classification head; call replace_head() first")
        return feats, self.head(feats)

    def backbone_parameters(self):
        head_ids = {id(p) for p in self.head.parameters()} if self.head is not None else set()
        return [(n, p) for n, p in self.named_parameters() if id(p) not in head_ids]

    @contextmanager
    def capture(self, *names: str):
        registry = self.layer_registry
        missing = [n for n in names if n not in registry]
        if missing:
            raise KeyError(f"unknown layer(s) {missing}; registry: {list(registry)}")
        taps = [registry[n] for n in names]
        for t in taps:
            t.capturing = True
            t.activation = None
        try:
            yield {t.name: t for t in taps}
        finally:
            for t in taps:
                t.capturing = False


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product attention over ``(B, N, D)`` tokens."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"heads {heads} does not divide dim {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.keep_attention = False
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = scores.softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.drop(self.proj(out))


def mhsa(tokens: torch.Tensor, heads: int, params: nn.Module) -> torch.Tensor:
    """Apply ``params`` (a :class:`MultiHeadSelfAttention`) to ``(N, D)`` or ``(B, N, D)`` tokens."""
    if params.heads != heads:
        raise ConfigError(f"module has {params.heads} heads, asked for {heads}")
    squeeze = tokens.dim() == 2
    out = params(tokens[None] if squeeze else tokens)
    return out[0] if squeeze else out


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(F.gelu(self.fc1(x)))))


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of a ``(B, C, H, W)`` map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def patchify(img: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, C, H, W)`` to ``(B, N, C*p*p)`` in row-major patch order."""
    b, c, h, w = img.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}")
    p = patch_size
    x = img.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


class PatchEmbed(nn.Module):
    """Flatten non-overlapping patches, project linearly, add learned positions."""

    def __init__(self, image_side: int, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        if image_side % patch_size:
            raise ConfigError(f"image side {image_side} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.num_patches = (image_side // patch_size) ** 2
        self.proj = nn.Linear(in_chans * patch_size * patch_size, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches, embed_dim))

    def forward(self, img):
        tokens = self.proj(patchify(img, self.patch_size))
        if tokens.shape[1] != self.num_patches:
            raise ConfigError(f"expected {self.num_patches} patches, got {tokens.shape[1]}")
        return tokens + self.pos_embed


def patch_embed(img: torch.Tensor, patch_size: int, embed_dim: int, params: PatchEmbed) -> torch.Tensor:
    """Token sequence ``(N, D)`` for a single ``(3, H, W)`` image."""
    if params.patch_size != patch_size or params.proj.out_features != embed_dim:
        raise ConfigError("patch embedding parameters do not match patch_size/embed_dim")
    return params(img[None])[0]
