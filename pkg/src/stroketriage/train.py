"""Transfer-learning protocol: new head, freezing, class-weighted CE, Adam."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch

from .backbones import Backbone, save_backbone
from .data import NUM_CLASSES, Manifest, class_weights
from .preprocess import SCRATCH_MEAN, SCRATCH_STD, AugmentPolicy, augment, load_and_resize, normalize, record_seed

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "classical", "cgan", "classical+cgan")
FREEZE_MODES = ("head_only", "full")

# grid values; defaults below are mid-grid picks
LR_GRID = (1e-3, 1e-5, 3e-4)
BATCH_GRID = (16, 32, 64)
EPOCH_GRID = (25, 40, 50, 100)
DROPOUT_GRID = (0.03, 0.04, 0.05)


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, msg, last_good_state=None):
        super().__init__(msg)
        self.last_good_state = last_good_state


class NumericError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 50
    dropout: float = 0.04
    freeze_mode: str = "full"
    use_class_weights: bool = True
    augmentation: str = "none"
    seed: int = 0
    dtype: str = "float32"
    norm_mean: tuple[float, float, float] = SCRATCH_MEAN
    norm_std: tuple[float, float, float] = SCRATCH_STD
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}; only 'adam' ships")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        object.__setattr__(self, "norm_mean", tuple(self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(self.norm_std))
        if isinstance(self.policy, dict):
            p = dict(self.policy)
            if "crop_scale_range" in p:
                p["crop_scale_range"] = tuple(p["crop_scale_range"])
            object.__setattr__(self, "policy", AugmentPolicy(**p))

    @property
    def classical(self) -> bool:
        return self.augmentation in ("classical", "classical+cgan")

    @property
    def uses_cgan(self) -> bool:
        return self.augmentation in ("cgan", "classical+cgan")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm_mean"] = list(self.norm_mean)
        d["norm_std"] = list(self.norm_std)
        d["policy"]["crop_scale_range"] = list(self.policy.crop_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class HistoryRow(NamedTuple):
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_loss: float
    eval_accuracy: float


@dataclass
class TrainState:
    model: Backbone
    epoch: int = 0
    history: list[HistoryRow] = field(default_factory=list)
    best_epoch: int = 0
    best_state: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None


# -- softmax / loss ----------------------------------------------------------

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, labels, weights) -> float:
    """``-w_y log softmax(l)_y``; for a batch, the weighted mean ``sum(w_i l_i) / sum(w_i)``."""
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.ndim == 1:
        y = int(labels)
        if y not in range(logits.shape[0]):
            raise ValueError(f"label {y} outside 0..{logits.shape[0] - 1}")
        return float(-weights[y] * log_softmax(logits)[y])
    labels = np.asarray(labels, dtype=np.int64)
    w = weights[labels]
    per = -log_softmax(logits)[np.arange(len(labels)), labels]
    return float((w * per).sum() / w.sum())


def weighted_cross_entropy_grad(logits, labels, weights) -> np.ndarray:
    """Analytic ``d loss / d logits`` = ``w_y (softmax - onehot) / sum(w)``."""
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
        labels = [int(labels)]
    labels = np.asarray(labels, dtype=np.int64)
    w = weights[labels]
    onehot = np.eye(logits.shape[-1])[labels]
    norm = 1.0 if single else w.sum()
    g = w[:, None] * (softmax(logits) - onehot) / norm
    return g[0] if single else g


def weighted_ce_torch(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor, reduction="mean"):
    per = -torch.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]
    w = weights.to(logits.dtype)[labels]
    if reduction == "none":
        return w * per, w
    return (w * per).sum() / w.sum()


# -- head / freezing ---------------------------------------------------------

def apply_freeze(model: Backbone, mode: str) -> Backbone:
    if model.head is None:
        raise TrainingError("attach a head with replace_head() before freezing")
    if mode not in FREEZE_MODES:
        raise ValueError(f"freeze mode must be one of {FREEZE_MODES}")
    for _, p in model.backbone_parameters():
        p.requires_grad_(mode == "full")
    for p in model.head.parameters():
        p.requires_grad_(True)
    return model


def count_parameters(model, trainable_only=False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


# -- data --------------------------------------------------------------------

class ImageCache:
    """Decoded unit-range tensors for every record of a manifest."""

    def __init__(self, manifest: Manifest, side: int, dtype=torch.float32):
        if len(manifest) == 0:
            raise TrainingError("manifest is empty")
        self.manifest = manifest
        self.images = torch.stack([load_and_resize(r.path, side, dtype) for r in manifest.records])
        self.labels = torch.tensor(manifest.labels, dtype=torch.long)

    def __len__(self):
        return len(self.labels)

    def batch(self, idx, cfg: TrainConfig, epoch: int, train: bool):
        imgs = []
        for i in idx:
            img = self.images[i]
            if train and cfg.classical:
                img = augment(img, cfg.policy, record_seed(cfg.seed, epoch, int(i)))
            imgs.append(normalize(img, cfg.norm_mean, cfg.norm_std))
        return torch.stack(imgs), self.labels[idx]


@torch.no_grad()
def predict_logits(model: Backbone, cache: ImageCache, cfg: TrainConfig, batch_size: int | None = None) -> torch.Tensor:
    model.eval()
    bs = batch_size or cfg.batch_size
    out = []
    for start in range(0, len(cache), bs):
        x, _ = cache.batch(np.arange(start, min(start + bs, len(cache))), cfg, 0, train=False)
        out.append(model(x.to(cfg.torch_dtype)))
    return torch.cat(out)


def _evaluate(model, cache, cfg, weights_t):
    logits = predict_logits(model, cache, cfg)
    per, w = weighted_ce_torch(logits, cache.labels, weights_t, reduction="none")
    loss = float(per.double().sum() / w.double().sum())
    acc = float((logits.argmax(-1) == cache.labels).double().mean())
    return loss, acc


# -- fit ---------------------------------------------------------------------

def fit(
    train_manifest: Manifest,
    test_manifest: Manifest,
    backbone: Backbone,
    cfg: TrainConfig,
    out_dir=None,
    weights=None,
    caches: tuple[ImageCache, ImageCache] | None = None,
) -> TrainState:
    """Fine-tune ``backbone`` (head already attached) and evaluate every epoch.

    The best-by-eval-accuracy parameters (ties go to the later epoch) are kept
    in ``state.best_state`` and, when ``out_dir`` is given, written to
    ``best.safetensors`` alongside ``history.csv``.
    """
    if backbone.head is None:
        raise TrainingError("attach a head with replace_head() before fit()")
    train_paths = {str(r.path) for r in train_manifest.records}
    if any(str(r.path) in train_paths for r in test_manifest.records):
        raise TrainingError("train and test manifests overlap")

    torch.manual_seed(cfg.seed)
    model = backbone.to(cfg.torch_dtype)
    for m in model.modules():
        if isinstance(m, torch.nn.Dropout):
            m.p = cfg.dropout
    apply_freeze(model, cfg.freeze_mode)

    side = model.config.image_side
    if caches is None:
        caches = (ImageCache(train_manifest, side), ImageCache(test_manifest, side))
    train_cache, test_cache = caches

    if weights is None:
        weights = class_weights(train_manifest) if cfg.use_class_weights else np.ones(NUM_CLASSES)
    weights_t = torch.as_tensor(np.asarray(weights), dtype=cfg.torch_dtype)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    state = TrainState(model)
    best_acc = -1.0
    n = len(train_cache)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = np.zeros(n)
        wsum = np.zeros(n)
        correct = np.zeros(n, dtype=bool)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = train_cache.batch(idx, cfg, epoch, train=True)
            logits = model(x.to(cfg.torch_dtype))
            per, w = weighted_ce_torch(logits, y, weights_t, reduction="none")
            loss = per.sum() / w.sum()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}", last_good_state=state.best_state
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses[idx] = per.detach().double().numpy()
            wsum[idx] = w.detach().double().numpy()
            correct[idx] = (logits.argmax(-1) == y).numpy()

        train_loss = float(losses.sum() / wsum.sum())
        eval_loss, eval_acc = _evaluate(model, test_cache, cfg, weights_t)
        if not np.isfinite(eval_loss):
            raise TrainingDivergedError(f"non-finite eval loss at epoch {epoch}", last_good_state=state.best_state)
        row = HistoryRow(epoch, train_loss, float(correct.mean()), eval_loss, eval_acc)
        state.history.append(row)
        state.epoch = epoch
        log.info("epoch %d train_loss %.4f train_acc %.4f eval_loss %.4f eval_acc %.4f", *row)
        if eval_acc >= best_acc:
            best_acc = eval_acc
            state.best_epoch = epoch
            state.best_state = copy.deepcopy(model.state_dict())

    state.rng_state = torch.get_rng_state()
    if out_dir is not None:
        save_checkpoint(state, cfg, out_dir)
    return state


def write_history(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HistoryRow._fields)
        for row in history:
            w.writerow([row.epoch] + [repr(float(v)) for v in row[1:]])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [
            HistoryRow(int(r["epoch"]), *(float(r[k]) for k in HistoryRow._fields[1:]))
            for r in csv.DictReader(fh)
        ]


def save_checkpoint(state: TrainState, cfg: TrainConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = state.model
    current = copy.deepcopy(model.state_dict())
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    extra = {
        "train_config": json.dumps(cfg.to_dict(), sort_keys=True),
        "history": json.dumps([list(r) for r in state.history]),
        "epoch": str(state.best_epoch),
    }
    save_backbone(model, out_dir / "best.safetensors", extra)
    model.load_state_dict(current)
    write_history(state.history, out_dir / "history.csv")
