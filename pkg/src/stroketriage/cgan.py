"""Label-conditioned GAN for minority-class synthesis.

Training runs in two phases: a stabilization phase where nothing is saved,
then a generation phase that writes a fixed number of images per epoch,
split evenly across the minority classes, into ``<out>/<class>/ep<E>_<i>.png``.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .backbones.archive import load_params, save_params
from .data import CLASS_NAMES, NUM_CLASSES, SYNTHETIC, TRAIN, ImageRecord, Manifest, DataError
from .preprocess import load_and_resize

log = logging.getLogger(__name__)

STABILIZATION = "stabilization"
GENERATION = "generation"
DONE = "done"
CHECKPOINT = "gan.safetensors"
LOSS_CSV = "gan_loss.csv"


class GanError(RuntimeError):
    pass


class GanDivergenceError(GanError):
    pass


class PolicyViolationError(DataError):
    pass


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 100
    gen_image_side: int = 64
    num_classes: int = NUM_CLASSES
    stabilization_epochs: int = 200
    generation_epochs: int = 800
    images_per_generation_epoch: int = 800
    minority_classes: tuple[int, ...] = (1, 2)
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 32
    embed_dim: int = 50
    base_channels: int = 16
    disc_dropout: float = 0.3
    merge_count_per_class: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "minority_classes", tuple(sorted(int(c) for c in self.minority_classes)))
        if isinstance(self.merge_count_per_class, dict):
            merge = {int(k): int(v) for k, v in self.merge_count_per_class.items()}
            object.__setattr__(self, "merge_count_per_class", merge)
        elif self.merge_count_per_class not in (None, "all"):
            raise ValueError("merge_count_per_class must be null, 'all' or a class -> count mapping")
        if not self.minority_classes:
            raise ValueError("minority_classes must not be empty")
        if any(c not in range(self.num_classes) for c in self.minority_classes):
            raise ValueError(f"minority_classes {self.minority_classes} outside 0..{self.num_classes - 1}")
        if self.images_per_generation_epoch % len(self.minority_classes):
            raise ValueError("images_per_generation_epoch must divide evenly across minority_classes")
        side = self.gen_image_side
        if side < 8 or side & (side - 1):
            raise ValueError(f"gen_image_side must be a power of two >= 8, got {side}")
        if self.stabilization_epochs < 0 or self.generation_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def total_epochs(self) -> int:
        return self.stabilization_epochs + self.generation_epochs

    def phase_at(self, epoch: int) -> str:
        """Phase of the epoch with 0-based index ``epoch``."""
        if epoch < self.stabilization_epochs:
            return STABILIZATION
        if epoch < self.total_epochs:
            return GENERATION
        return DONE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["minority_classes"] = list(self.minority_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gan config keys: {sorted(unknown)}")
        return cls(**d)


class Generator(nn.Module):
    """Noise + label embedding -> dense projection -> transposed convs -> sigmoid."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        self.n_up = int(np.log2(cfg.gen_image_side // 4))
        c = cfg.base_channels * 2**self.n_up
        self.start_channels = c
        self.embed = nn.Embedding(cfg.num_classes, cfg.embed_dim)
        self.fc = nn.Linear(cfg.noise_dim + cfg.embed_dim, c * 16)
        ups = []
        for i in range(self.n_up):
            out = 1 if i == self.n_up - 1 else c // 2
            ups.append(nn.ConvTranspose2d(c, out, 4, stride=2, padding=1))
            c = out
        self.ups = nn.ModuleList(ups)

    def forward(self, z, labels):
        h = self.fc(torch.cat([z, self.embed(labels)], dim=1))
        h = F.leaky_relu(h, 0.2).view(-1, self.start_channels, 4, 4)
        for i, up in enumerate(self.ups):
            h = up(h)
            if i < len(self.ups) - 1:
                h = F.leaky_relu(h, 0.2)
        return torch.sigmoid(h)


class Discriminator(nn.Module):
    """Image + label-embedding channel -> strided convs -> dense -> logit."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.gen_image_side
        self.embed = nn.Embedding(cfg.num_classes, s * s)
        n_down = int(np.log2(s // 4))
        convs, c_in = [], 2
        for i in range(n_down):
            c_out = cfg.base_channels * 2 ** min(i, 3)
            convs.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.drop = nn.Dropout(cfg.disc_dropout)
        self.fc = nn.Linear(c_in * 16, 1)

    def logits(self, img, labels):
        s = self.cfg.gen_image_side
        if img.shape[1:] != (1, s, s):
            raise GanError(f"discriminator expects (B, 1, {s}, {s}) images, got {tuple(img.shape)}")
        h = torch.cat([img, self.embed(labels).view(-1, 1, s, s)], dim=1)
        for conv in self.convs:
            h = self.drop(F.leaky_relu(conv(h), 0.2))
        return self.fc(h.flatten(1))[:, 0]

    def forward(self, img, labels):
        return torch.sigmoid(self.logits(img, labels))


def _init(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, 0.0, 1.0)


def build_gan(cfg: GanConfig, seed: int = 0):
    torch.manual_seed(seed)
    g, d = Generator(cfg), Discriminator(cfg)
    g.apply(_init)
    d.apply(_init)
    return g, d


def _check_label(label, cfg):
    labels = torch.as_tensor(label).reshape(-1)
    if torch.any(labels < 0) or torch.any(labels >= cfg.num_classes):
        raise GanError(f"label(s) {labels.tolist()} outside 0..{cfg.num_classes - 1}")
    return labels.long()


@torch.no_grad()
def generator_forward(params: Generator, z, label) -> torch.Tensor:
    """One ``(1, S, S)`` image in [0, 1] for noise ``z`` and class ``label``."""
    z = torch.as_tensor(z, dtype=torch.float32).reshape(1, -1)
    if z.shape[1] != params.cfg.noise_dim:
        raise GanError(f"noise must have length {params.cfg.noise_dim}, got {z.shape[1]}")
    params.eval()
    return params(z, _check_label(label, params.cfg))[0]


@torch.no_grad()
def discriminator_forward(params: Discriminator, img, label) -> float:
    img = torch.as_tensor(img, dtype=torch.float32)
    if img.dim() == 3:
        img = img[None]
    params.eval()
    return float(params(img, _check_label(label, params.cfg))[0])


@dataclass
class GanState:
    generator: Generator
    discriminator: Discriminator
    cfg: GanConfig
    epoch: int = 0
    phase: str = STABILIZATION
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)
    # (epoch, {class: mean intensity of a fixed-noise batch})
    class_mean_history: list[tuple[int, dict[int, float]]] = field(default_factory=list)
    real_class_means: dict[int, float] = field(default_factory=dict)
    saved_images: int = 0


def load_gray_images(manifest: Manifest, side: int) -> tuple[torch.Tensor, torch.Tensor]:
    imgs = torch.stack([load_and_resize(r.path, max(side, 32))[:1] for r in manifest.records])
    if side < 32:
        imgs = F.interpolate(imgs, size=(side, side), mode="bilinear", antialias=True, align_corners=False)
    return imgs, torch.tensor(manifest.labels, dtype=torch.long)


def _fixed_eval_noise(cfg: GanConfig, seed: int, per_class: int = 32):
    g = torch.Generator().manual_seed(seed + 7919)
    z = torch.randn(per_class * len(cfg.minority_classes), cfg.noise_dim, generator=g)
    labels = torch.tensor(cfg.minority_classes).repeat_interleave(per_class)
    return z, labels


def _save_png(img: torch.Tensor, path: Path):
    arr = np.round(img[0].clamp(0, 1).numpy() * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def train_cgan(train_manifest: Manifest, cfg: GanConfig, seed: int, out_dir, data=None) -> GanState:
    """Alternate discriminator/generator BCE updates over the training split.

    ``data`` may carry preloaded ``(images, labels)`` at ``cfg.gen_image_side``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for c in cfg.minority_classes:
            (out_dir / CLASS_NAMES[c]).mkdir(exist_ok=True)
    except OSError as exc:
        raise GanError(f"cannot write to {out_dir}: {exc}") from exc

    images, labels = data if data is not None else load_gray_images(train_manifest, cfg.gen_image_side)
    present = set(labels.tolist())
    absent = [CLASS_NAMES[c] for c in cfg.minority_classes if c not in present]
    if absent:
        raise GanError(f"training split has no images for minority class(es): {', '.join(absent)}")

    gen, disc = build_gan(cfg, seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    noise = torch.Generator().manual_seed(seed)
    state = GanState(gen, disc, cfg, phase=cfg.phase_at(0))
    state.real_class_means = {c: float(images[labels == c].mean()) for c in cfg.minority_classes}
    eval_z, eval_labels = _fixed_eval_noise(cfg, seed)
    n = len(labels)
    per_class = cfg.images_per_generation_epoch // len(cfg.minority_classes)

    for epoch in range(cfg.total_epochs):
        gen.train()
        disc.train()
        order = np.random.default_rng([seed, epoch]).permutation(n)
        g_losses, d_losses = [], []
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            real, y = images[idx], labels[idx]
            b = len(idx)
            z = torch.randn(b, cfg.noise_dim, generator=noise)
            fake = gen(z, y)

            d_real = disc.logits(real, y)
            d_fake = disc.logits(fake.detach(), y)
            d_loss = F.binary_cross_entropy_with_logits(d_real, torch.ones(b)) + F.binary_cross_entropy_with_logits(
                d_fake, torch.zeros(b)
            )
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

            g_loss = F.binary_cross_entropy_with_logits(disc.logits(fake, y), torch.ones(b))
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()

            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise GanDivergenceError(
                    f"non-finite GAN loss at epoch {epoch + 1}: gen {float(g_loss)}, disc {float(d_loss)}; "
                    f"last finite epoch {state.epoch}"
                )
            g_losses.append(g_loss.item())
            d_losses.append(d_loss.item())

        gen.eval()
        with torch.no_grad():
            sample = gen(eval_z, eval_labels)
        means = {c: float(sample[eval_labels == c].mean()) for c in cfg.minority_classes}

        if cfg.phase_at(epoch) == GENERATION:
            with torch.no_grad():
                for c in cfg.minority_classes:
                    z = torch.randn(per_class, cfg.noise_dim, generator=noise)
                    batch = gen(z, torch.full((per_class,), c, dtype=torch.long))
                    for i, img in enumerate(batch):
                        _save_png(img, out_dir / CLASS_NAMES[c] / f"ep{epoch + 1}_{i}.png")
            state.saved_images += per_class * len(cfg.minority_classes)

        # files for this epoch are on disk before the counter advances
        state.epoch = epoch + 1
        state.phase = cfg.phase_at(epoch + 1)
        state.loss_history.append((epoch + 1, float(np.mean(g_losses)), float(np.mean(d_losses))))
        state.class_mean_history.append((epoch + 1, means))
        log.info("gan epoch %d [%s] gen %.4f disc %.4f", epoch + 1, cfg.phase_at(epoch), *state.loss_history[-1][1:])

    save_gan(state, out_dir / CHECKPOINT)
    write_loss_csv(state.loss_history, out_dir / LOSS_CSV)
    return state


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "gen_loss", "disc_loss"])
        for e, g, d in history:
            w.writerow([e, repr(g), repr(d)])


def save_gan(state: GanState, path):
    tensors = {f"generator.{k}": v for k, v in state.generator.state_dict().items()}
    tensors.update({f"discriminator.{k}": v for k, v in state.discriminator.state_dict().items()})
    meta = {
        "gan_config": json.dumps(state.cfg.to_dict(), sort_keys=True),
        "epoch": str(state.epoch),
        "phase": state.phase,
        "loss_history": json.dumps(state.loss_history),
    }
    save_params(path, tensors, meta)


def load_gan(path) -> GanState:
    path = Path(path)
    if not path.is_file():
        raise GanError(f"missing GAN checkpoint {path}; run train-gan first")
    tensors, meta = load_params(path)
    cfg = GanConfig.from_dict(json.loads(meta["gan_config"]))
    gen, disc = Generator(cfg), Discriminator(cfg)
    gen.load_state_dict({k[len("generator."):]: v for k, v in tensors.items() if k.startswith("generator.")})
    disc.load_state_dict({k[len("discriminator."):]: v for k, v in tensors.items() if k.startswith("discriminator.")})
    history = [tuple(r) for r in json.loads(meta["loss_history"])]
    return GanState(gen, disc, cfg, epoch=int(meta["epoch"]), phase=meta["phase"], loss_history=history)


@torch.no_grad()
def sample(gen: Generator, label: int, n: int, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, gen.cfg.noise_dim, generator=g)
    gen.eval()
    return gen(z, torch.full((n,), label, dtype=torch.long))


@torch.no_grad()
def discriminator_accuracy(state: GanState, real: torch.Tensor, labels: torch.Tensor, seed: int = 0) -> float:
    """Accuracy of D on ``real`` plus an equal number of generated images (threshold 0.5)."""
    g = torch.Generator().manual_seed(seed)
    state.generator.eval()
    state.discriminator.eval()
    fake = state.generator(torch.randn(len(labels), state.cfg.noise_dim, generator=g), labels)
    hits = (state.discriminator(real, labels) > 0.5).sum() + (state.discriminator(fake, labels) <= 0.5).sum()
    return float(hits) / (2 * len(labels))


_EPOCH_RE = re.compile(r"ep(\d+)_(\d+)")


def _synthetic_order(path: Path):
    m = _EPOCH_RE.search(path.stem)
    return (int(m.group(1)), int(m.group(2))) if m else (-1, -1)


def merge_synthetic(train_manifest: Manifest, synth_root, merge_count_per_class=None, minority_classes=(1, 2)) -> Manifest:
    """Append synthetic minority-class images to the training manifest.

    ``merge_count_per_class`` maps class -> count; ``None`` takes, per class,
    the latest-epoch images needed to reach the majority count; ``"all"``
    merges everything found.
    """
    synth_root = Path(synth_root)
    counts = train_manifest.class_counts
    target = max(counts.values())
    records = list(train_manifest.records)
    if not synth_root.is_dir():
        return Manifest(records, train_manifest.root)

    for label, name in enumerate(CLASS_NAMES):
        d = synth_root / name
        files = sorted((p for p in d.glob("*.png")), key=_synthetic_order) if d.is_dir() else []
        if not files:
            continue
        if label not in minority_classes:
            raise PolicyViolationError(
                f"{d} holds {len(files)} synthetic images but class {name!r} is not a minority class"
            )
        if merge_count_per_class == "all":
            k = len(files)
        elif merge_count_per_class is None:
            k = min(len(files), max(0, target - counts[label]))
        else:
            k = min(len(files), int(merge_count_per_class.get(label, merge_count_per_class.get(str(label), 0))))
        chosen = files[len(files) - k :] if k else []
        records += [ImageRecord(p, label, SYNTHETIC, TRAIN) for p in chosen]
    return Manifest(records, train_manifest.root)


def lesion_features(img) -> tuple[float, float]:
    """Fractions of bright (> 0.8) and dark (< 0.35) pixels inside the eroded brain mask."""
    img = np.asarray(img, dtype=np.float64).squeeze()
    fg = ndimage.binary_fill_holes(img > 0.1)
    core = ndimage.binary_erosion(fg, iterations=3)
    if not core.any():
        core = fg
    if not core.any():
        return 0.0, 0.0
    v = img[core]
    return float((v > 0.8).mean()), float((v < 0.35).mean())


def _best_threshold(values, positive):
    values = np.asarray(values)
    cands = np.unique(values)
    cuts = (cands[:-1] + cands[1:]) / 2 if len(cands) > 1 else cands
    best, best_acc = cuts[0], -1.0
    for t in cuts:
        pred = values > t
        acc = 0.5 * ((pred & positive).sum() / max(positive.sum(), 1) + (~pred & ~positive).sum() / max((~positive).sum(), 1))
        if acc > best_acc:
            best, best_acc = t, acc
    return float(best)


class IntensityThresholdClassifier:
    """Two-stump classifier: bright-lesion share -> hemorrhagic, dark-lesion share -> ischemic."""

    def fit(self, images, labels):
        feats = np.array([lesion_features(x) for x in images])
        labels = np.asarray(labels)
        self.bright_threshold = _best_threshold(feats[:, 0], labels == 1)
        self.dark_threshold = _best_threshold(feats[:, 1], labels == 2)
        return self

    def predict(self, images) -> np.ndarray:
        out = []
        for x in images:
            bright, dark = lesion_features(x)
            sb = bright / max(self.bright_threshold, 1e-12)
            sd = dark / max(self.dark_threshold, 1e-12)
            out.append(0 if max(sb, sd) <= 1 else (1 if sb >= sd else 2))
        return np.array(out)
