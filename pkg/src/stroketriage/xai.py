"""Grad-CAM and Grad-CAM++ heatmaps over registry taps, overlays and localization scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import Backbone

log = logging.getLogger(__name__)

VARIANTS = ("gradcam", "gradcampp")
DEPTH_TAGS = ("early", "mid", "deep")
# layer names used for timm-style MaxViT weights
MAXVIT_PROBES = {
    "early": "stem.conv1",
    "mid": "stages.1.blocks.1.conv.conv2_kxk",
    "deep": "stages.3.blocks.1.conv.conv2_kxk",
}


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerProbe:
    depth_tag: str
    layer_name: str


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    layer_name: str
    target_class: int
    variant: str
    degenerate: bool = False


def resolve_probes(model: Backbone) -> list[LayerProbe]:
    """First, middle and last spatial registry layers, preferring the MaxViT names when present."""
    registry = model.layer_registry
    spatial = [name for name, tap in registry.items() if tap.spatial]
    if len(spatial) < 3:
        raise ProbeError(f"need at least 3 spatial layers, registry has {spatial} (all: {list(registry)})")
    picks = dict(zip(DEPTH_TAGS, (spatial[0], spatial[len(spatial) // 2], spatial[-1])))
    for tag, name in MAXVIT_PROBES.items():
        if name in spatial:
            picks[tag] = name
    return [LayerProbe(tag, picks[tag]) for tag in DEPTH_TAGS]


def activations_and_gradients(model: Backbone, img: torch.Tensor, target_class: int, layer_name: str):
    """Activation ``A`` (C, h, w) at ``layer_name`` and ``d logit_c / d A``, in float64."""
    registry = model.layer_registry
    if layer_name not in registry:
        raise ProbeError(f"unknown layer {layer_name!r}; registry: {list(registry)}")
    if not registry[layer_name].spatial:
        raise ProbeError(f"layer {layer_name!r} has no spatial layout")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = img[None].to(dtype)
    with torch.enable_grad(), model.capture(layer_name) as caps:
        logits = model(x)
        if not 0 <= target_class < logits.shape[-1]:
            raise ProbeError(f"target class {target_class} outside 0..{logits.shape[-1] - 1}")
        act = caps[layer_name].activation
        (grad,) = torch.autograd.grad(logits[0, target_class], act)
    return act[0].detach().double(), grad[0].detach().double()


def gradcam_weights(grads: torch.Tensor) -> torch.Tensor:
    return grads.mean(dim=(1, 2))


def gradcampp_weights(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """Per-channel weights ``sum_ij alpha_ij relu(g_ij)`` with the exp-score alpha; 0/0 -> 0."""
    g2 = grads**2
    g3 = grads**3
    denom = 2 * g2 + acts.sum(dim=(1, 2), keepdim=True) * g3
    safe = torch.where(denom != 0, denom, torch.ones_like(denom))
    alpha = torch.where(denom != 0, g2 / safe, torch.zeros_like(g2))
    return (alpha * F.relu(grads)).sum(dim=(1, 2))


def finalize(raw: torch.Tensor, size: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Upsample a non-negative ``(h, w)`` map and min-max normalize; flags all-zero maps."""
    up = raw[None, None]
    if tuple(raw.shape) != tuple(size):
        up = F.interpolate(up, size=size, mode="bilinear", align_corners=False)
    up = up[0, 0].clamp_min(0)
    hi, lo = float(up.max()), float(up.min())
    if hi <= 0:
        return np.zeros(size), True
    if hi - lo <= 1e-12 * hi:
        return np.ones(size), False
    return ((up - lo) / (hi - lo)).numpy(), False


def _heatmap(model, img, target_class, probe, variant):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    name = probe.layer_name if isinstance(probe, LayerProbe) else probe
    acts, grads = activations_and_gradients(model, img, target_class, name)
    w = gradcam_weights(grads) if variant == "gradcam" else gradcampp_weights(acts, grads)
    raw = F.relu((w[:, None, None] * acts).sum(dim=0))
    values, degenerate = finalize(raw, tuple(img.shape[-2:]))
    if degenerate:
        log.warning("degenerate %s heatmap at %s for class %d", variant, name, target_class)
    return Heatmap(values, name, int(target_class), variant, degenerate)


def gradcam(model: Backbone, img: torch.Tensor, target_class: int, probe) -> Heatmap:
    """Channel weights are spatial means of ``d y_c / d A``."""
    return _heatmap(model, img, target_class, probe, "gradcam")


def gradcampp(model: Backbone, img: torch.Tensor, target_class: int, probe) -> Heatmap:
    return _heatmap(model, img, target_class, probe, "gradcampp")


def explain(model, img, target_class, probe, variant="gradcampp") -> Heatmap:
    return _heatmap(model, img, target_class, probe, variant)


def colormap(h: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue (0) -> green (0.5) -> red (1); returns ``(..., 3)``."""
    h = np.clip(np.asarray(h, dtype=np.float64), 0.0, 1.0)
    r = np.clip(2 * h - 1, 0, 1)
    g = 1 - np.abs(2 * h - 1)
    b = np.clip(1 - 2 * h, 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay(h: Heatmap, img, alpha: float = 0.4) -> np.ndarray:
    """Blend the colormapped heatmap over a unit-range image; returns ``(H, W, 3)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    base = img.detach().double().numpy() if isinstance(img, torch.Tensor) else np.asarray(img, dtype=np.float64)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=-1)
    elif base.ndim == 3 and base.shape[0] in (1, 3) and base.shape[-1] not in (1, 3):
        base = np.repeat(base, 3 // base.shape[0], axis=0).transpose(1, 2, 0)
    if base.shape[:2] != h.values.shape:
        raise ValueError(f"heatmap {h.values.shape} and image {base.shape[:2]} differ in size")
    return (1 - alpha) * base + alpha * colormap(h.values)


def localization_score(h: Heatmap, truth_box, mass_fraction: float = 0.1) -> float:
    """Share of the top ``mass_fraction`` of heatmap mass lying inside ``[x0, y0, x1, y1)``.

    Pixels tied at the cut-off value are counted fractionally, so a uniform
    map scores the box's area share.  Degenerate heatmaps score 0.
    """
    if not 0.0 < mass_fraction <= 1.0:
        raise ValueError(f"mass_fraction must lie in (0, 1], got {mass_fraction}")
    v = np.asarray(h.values, dtype=np.float64)
    H, W = v.shape
    x0, y0, x1, y1 = (int(c) for c in truth_box)
    if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
        raise ValueError(f"box {truth_box} outside {W}x{H} heatmap")
    total = v.sum()
    if h.degenerate or total <= 0:
        return 0.0
    target = mass_fraction * total
    flat = np.sort(v.ravel())[::-1]
    k = int(np.searchsorted(np.cumsum(flat), target * (1 - 1e-12)))
    t = flat[min(k, flat.size - 1)]
    above = v > t
    tied = v == t
    partial = (target - v[above].sum()) / (tied.sum() * t) if t > 0 else 0.0
    inside = np.zeros_like(above)
    inside[y0:y1, x0:x1] = True
    mass_in = v[above & inside].sum() + partial * t * (tied & inside).sum()
    return float(np.clip(mass_in / target, 0.0, 1.0))


def scale_box(box, from_side: int, to_side: int):
    if from_side == to_side:
        return list(box)
    s = to_side / from_side
    x0, y0, x1, y1 = box
    return [int(np.floor(x0 * s)), int(np.floor(y0 * s)), int(np.ceil(x1 * s)), int(np.ceil(y1 * s))]
