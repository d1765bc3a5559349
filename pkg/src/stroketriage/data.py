"""Corpus ingestion, stratified splitting, class weights and the toy corpus.

Labels are fixed: 0 = no stroke (``normal``), 1 = hemorrhagic, 2 = ischemic.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CLASS_NAMES = ("normal", "hemorrhagic", "ischemic")
NUM_CLASSES = len(CLASS_NAMES)
IMAGE_SUFFIXES = {".png"}

REAL = "real"
SYNTHETIC = "synthetic"
TRAIN = "train"
TEST = "test"
UNASSIGNED = "unassigned"


class DataError(Exception):
    pass


class CorpusLayoutError(DataError):
    pass


class EmptyClassError(DataError):
    pass


class StratificationError(DataError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    label: int
    origin: str = REAL
    split: str = UNASSIGNED

    def __post_init__(self):
        if self.label not in range(NUM_CLASSES):
            raise DataError(f"label {self.label!r} outside 0..{NUM_CLASSES - 1}")
        if self.origin not in (REAL, SYNTHETIC):
            raise DataError(f"unknown origin {self.origin!r}")
        if self.split not in (TRAIN, TEST, UNASSIGNED):
            raise DataError(f"unknown split {self.split!r}")
        if self.origin == SYNTHETIC and self.split != TRAIN:
            raise DataError(f"synthetic record {self.path} must be in the train split")


@dataclass(frozen=True)
class Manifest:
    records: tuple[ImageRecord, ...]
    root: Path
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in range(NUM_CLASSES)}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.records]

    def check_paths(self):
        missing = [str(r.path) for r in self.records if not Path(r.path).is_file()]
        if missing:
            raise DataError(f"{len(missing)} manifest paths do not exist, e.g. {missing[0]}")

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "origin", "split"])
            for r in self.records:
                w.writerow([str(r.path), r.label, r.origin, r.split])

    @classmethod
    def from_csv(cls, path, root=None, check=True) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        records = [
            ImageRecord(Path(row["path"]), int(row["label"]), row["origin"], row["split"])
            for row in rows
        ]
        m = cls(records, Path(root) if root is not None else path.parent)
        if check:
            m.check_paths()
        return m


def _is_image(path: Path) -> bool:
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        return False
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception:
        return False
    return True


def scan_dataset(root) -> Manifest:
    """Build a manifest from ``<root>/{normal,hemorrhagic,ischemic}/*.png``.

    Unreadable files are skipped and reported in ``Manifest.warnings``.
    """
    root = Path(root)
    missing = [name for name in CLASS_NAMES if not (root / name).is_dir()]
    if missing:
        raise CorpusLayoutError(f"corpus at {root} lacks class directories: {', '.join(missing)}")

    records, warnings = [], []
    for label, name in enumerate(CLASS_NAMES):
        for path in sorted((root / name).iterdir()):
            if not path.is_file():
                continue
            if not _is_image(path):
                msg = f"skipping unreadable or non-image file {path}"
                log.warning(msg)
                warnings.append(msg)
                continue
            records.append(ImageRecord(path, label))

    m = Manifest(records, root, tuple(warnings))
    empty = [CLASS_NAMES[c] for c, n in m.class_counts.items() if n == 0]
    if empty:
        raise EmptyClassError(f"no images for class(es): {', '.join(empty)}")
    return m


def round_half_away(x: float) -> int:
    # guard against 0.2*n landing a hair below an exact .5
    return int(math.floor(abs(x) + 0.5 + 1e-9)) * (1 if x >= 0 else -1)


def split_test_count(n: int, train_fraction: float) -> int:
    return round_half_away((1.0 - train_fraction) * n)


def stratified_split(m: Manifest, train_fraction: float = 0.8, seed: int = 0):
    """Per-class seeded shuffle; ``round((1 - f) * n_c)`` records per class go to test."""
    if not 0.0 < train_fraction < 1.0:
        raise StratificationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    by_class: dict[int, list[ImageRecord]] = {c: [] for c in range(NUM_CLASSES)}
    for r in m.records:
        by_class[r.label].append(r)
    too_small = [CLASS_NAMES[c] for c, rs in by_class.items() if len(rs) < 2]
    if too_small:
        raise StratificationError(f"classes with fewer than 2 records: {', '.join(too_small)}")

    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(NUM_CLASSES):
        rs = by_class[c]
        order = rng.permutation(len(rs))
        k = split_test_count(len(rs), train_fraction)
        test_idx = set(order[:k].tolist())
        for i, r in enumerate(rs):
            if i in test_idx:
                test.append(replace(r, split=TEST))
            else:
                train.append(replace(r, split=TRAIN))
    return Manifest(train, m.root), Manifest(test, m.root)


def class_weights(m: Manifest) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * n_c)``."""
    counts = np.array([m.class_counts[c] for c in range(NUM_CLASSES)], dtype=np.float64)
    return weights_from_counts(counts)


def weights_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        empty = [CLASS_NAMES[c] for c in np.flatnonzero(counts <= 0)]
        raise EmptyClassError(f"cannot weight empty class(es): {', '.join(empty)}")
    return counts.sum() / (len(counts) * counts)


# -- toy corpus ------------------------------------------------------------

TISSUE = 0.55
HYPERDENSE = 0.95
HYPODENSE = 0.18


def _brain(rng, side):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = side / 2 + rng.uniform(-0.04, 0.04) * side
    cx = side / 2 + rng.uniform(-0.04, 0.04) * side
    ry = rng.uniform(0.36, 0.44) * side
    rx = rng.uniform(0.28, 0.36) * side
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    texture = rng.normal(0.0, 0.025, size=(side, side))
    img = np.where(mask, TISSUE + texture, 0.0)
    return img, mask, (cy, cx, ry, rx)


def _blob(rng, side, ellipse):
    cy, cx, ry, rx = ellipse
    radius = rng.uniform(0.09, 0.15) * side
    # keep the blob well inside the brain mask
    r = rng.uniform(0.0, 0.45)
    theta = rng.uniform(0.0, 2 * np.pi)
    by = cy + r * (ry - radius) * np.sin(theta)
    bx = cx + r * (rx - radius) * np.cos(theta)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    d = np.sqrt((yy - by) ** 2 + (xx - bx) ** 2)
    weight = np.clip(radius + 0.5 - d, 0.0, 1.0)
    ys, xs = np.nonzero(weight > 0)
    box = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
    return weight, box


def toy_image(seed: int, index: int, label: int, side: int):
    """Render one toy scan; returns ``(uint8 image, bbox or None)``.

    The brain ellipse depends only on ``(seed, index)`` so images of different
    classes sharing an index differ only by the lesion.
    """
    img, mask, ellipse = _brain(np.random.default_rng([seed, index]), side)
    box = None
    if label != 0:
        weight, box = _blob(np.random.default_rng([seed, index, label]), side, ellipse)
        weight = weight * mask
        target = HYPERDENSE if label == 1 else HYPODENSE
        img = img * (1 - weight) + target * weight
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), box


def generate_toy_corpus(out_root, n_per_class, image_size: int = 64, seed: int = 0) -> Manifest:
    """Write a procedural pseudo-CT corpus in the class-per-directory layout.

    Hemorrhagic images carry a bright disc inside the brain, ischemic images a
    dark one; ``toy_truth.json`` records each disc's ``[x0, y0, x1, y1)`` box.
    """
    if image_size < 32:
        raise DataError(f"image_size must be >= 32, got {image_size}")
    out_root = Path(out_root)
    n_per_class = {int(k): int(v) for k, v in n_per_class.items()}
    truth = {"image_size": image_size, "boxes": {}}
    for label, name in enumerate(CLASS_NAMES):
        (out_root / name).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class.get(label, 0)):
            arr, box = toy_image(seed, i, label, image_size)
            rel = f"{name}/toy_{i:05d}.png"
            Image.fromarray(arr, mode="L").save(out_root / rel)
            truth["boxes"][rel] = box
    with open(out_root / "toy_truth.json", "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return scan_dataset(out_root)


def load_truth(root):
    """Return ``{absolute path: box}`` and the image side from ``toy_truth.json``."""
    root = Path(root)
    with open(root / "toy_truth.json") as fh:
        truth = json.load(fh)
    boxes = {str((root / rel).resolve()): box for rel, box in truth["boxes"].items()}
    return boxes, truth["image_size"]
