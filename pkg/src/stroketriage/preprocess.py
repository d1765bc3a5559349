"""Image decoding, resizing, normalization and the classical augmentation policy.

Images travel as ``(3, H, W)`` float tensors.  Augmentation works on the
unit range and must run before :func:`normalize`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from PIL import Image, UnidentifiedImageError
from torchvision.transforms import InterpolationMode

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SCRATCH_MEAN = (0.5, 0.5, 0.5)
SCRATCH_STD = (0.5, 0.5, 0.5)


class ImageDecodeError(Exception):
    pass


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    hflip_prob: float = 0.5
    rotation_max_degrees: float = 15.0
    jitter_brightness: float = 0.1
    jitter_contrast: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise PreprocessError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise PreprocessError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.rotation_max_degrees < 0 or self.jitter_brightness < 0 or self.jitter_contrast < 0:
            raise PreprocessError("rotation and jitter magnitudes must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, True)


def read_image(path) -> np.ndarray:
    """Decode a PNG into float64 ``(H, W)`` or ``(H, W, 3)`` in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1", "LA"):
                arr = np.asarray(im.convert("F"), dtype=np.float64)
                scale = 65535.0 if im.mode in ("I;16", "I") else 255.0
                arr = arr / scale
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise PreprocessError(f"zero-size image {path}")
    return arr


def resize(img: torch.Tensor, side: int) -> torch.Tensor:
    if img.shape[-2:] == (side, side):
        return img.clone()
    return F.interpolate(img[None], size=(side, side), mode="bilinear", align_corners=False, antialias=True)[0]


def load_and_resize(path, side: int = 224, dtype=torch.float32) -> torch.Tensor:
    """Decode, bilinearly resize to ``side x side`` and replicate grayscale to three channels."""
    if side < 32:
        raise PreprocessError(f"side must be >= 32, got {side}")
    arr = read_image(path)
    if arr.ndim == 2:
        t = resize(torch.from_numpy(arr)[None], side)
        t = t.expand(3, side, side).clone()
    else:
        t = resize(torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))), side)
    return t.clamp_(0.0, 1.0).to(dtype)


def normalize(img: torch.Tensor, mean=SCRATCH_MEAN, std=SCRATCH_STD) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=img.dtype).view(-1, 1, 1)
    std = torch.as_tensor(std, dtype=img.dtype).view(-1, 1, 1)
    if torch.any(std <= 0):
        raise PreprocessError(f"std must be positive, got {std.flatten().tolist()}")
    return (img - mean) / std


def denormalize(img: torch.Tensor, mean=SCRATCH_MEAN, std=SCRATCH_STD) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=img.dtype).view(-1, 1, 1)
    std = torch.as_tensor(std, dtype=img.dtype).view(-1, 1, 1)
    return img * std + mean


def record_seed(global_seed: int, epoch: int, index: int) -> int:
    """Stable per-record seed, identical across processes (no ``hash()`` salting)."""
    digest = hashlib.sha256(f"{global_seed}:{epoch}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def augment(img: torch.Tensor, policy: AugmentPolicy, seed: int) -> torch.Tensor:
    """Random resized crop, h-flip, rotation, then brightness/contrast jitter.

    Deterministic in ``(img, policy, seed)``; output clamped to [0, 1].
    """
    if img.min() < 0 or img.max() > 1:
        raise PreprocessError("augment expects a unit-range image; call it before normalize()")
    if not policy.enabled:
        return img.clone()
    rng = np.random.default_rng(seed)
    _, h, w = img.shape
    out = img

    lo, hi = policy.crop_scale_range
    scale = rng.uniform(lo, hi)
    if scale < 1.0:
        ch = max(1, int(round(h * np.sqrt(scale))))
        cw = max(1, int(round(w * np.sqrt(scale))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = TF.resized_crop(out, top, left, ch, cw, [h, w], interpolation=InterpolationMode.BILINEAR, antialias=False)

    if rng.uniform() < policy.hflip_prob:
        out = torch.flip(out, dims=[-1])

    if policy.rotation_max_degrees > 0:
        angle = float(rng.uniform(-policy.rotation_max_degrees, policy.rotation_max_degrees))
        out = TF.rotate(out, angle, interpolation=InterpolationMode.BILINEAR, fill=0.0)

    if policy.jitter_brightness > 0:
        b = rng.uniform(1 - policy.jitter_brightness, 1 + policy.jitter_brightness)
        out = out * b
    if policy.jitter_contrast > 0:
        c = rng.uniform(1 - policy.jitter_contrast, 1 + policy.jitter_contrast)
        mean = out.mean()
        out = (out - mean) * c + mean

    if out is img:
        return img.clone()
    return out.clamp(0.0, 1.0)
