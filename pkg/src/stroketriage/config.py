"""Experiment configuration: nested dataclasses with a JSON round-trip."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .backbones import ARCHS, BackboneConfig, toy_config
from .cgan import GanConfig
from .preprocess import SCRATCH_MEAN, SCRATCH_STD, AugmentPolicy
from .train import TrainConfig
from .xai import DEPTH_TAGS, VARIANTS


class ConfigurationError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class ToyConfig:
    enabled: bool = False
    n_per_class: dict = field(default_factory=lambda: {0: 200, 1: 100, 2: 100})
    image_side: int = 64

    def __post_init__(self):
        object.__setattr__(self, "n_per_class", {int(k): int(v) for k, v in self.n_per_class.items()})
        if any(v < 0 for v in self.n_per_class.values()):
            raise ConfigurationError("toy n_per_class entries must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    root: Optional[str] = None
    train_fraction: float = 0.8
    toy: ToyConfig = field(default_factory=ToyConfig)

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class PreprocessConfig:
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    norm_mean: tuple = SCRATCH_MEAN
    norm_std: tuple = SCRATCH_STD

    def __post_init__(self):
        object.__setattr__(self, "norm_mean", tuple(float(v) for v in self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(float(v) for v in self.norm_std))
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3:
            raise ConfigurationError("norm_mean and norm_std need three entries")
        if min(self.norm_std) <= 0:
            raise ConfigurationError("norm_std entries must be > 0")


@dataclass(frozen=True)
class ExternalWeights:
    """Parameter archive for a backbone built elsewhere."""

    arch: str
    weights: str
    registry_map: dict = field(default_factory=dict)


@dataclass(frozen=True)
class XaiConfig:
    variant: str = "gradcampp"
    probes: Optional[dict] = None  # depth tag -> layer name; None picks automatically
    alpha: float = 0.4
    mass_fraction: float = 0.1
    num_images: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"xai.variant must be one of {VARIANTS}")
        if self.probes is not None and set(self.probes) - set(DEPTH_TAGS):
            raise ConfigurationError(f"xai.probes keys must be among {DEPTH_TAGS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("xai.alpha must lie in [0, 1]")
        if not 0.0 < self.mass_fraction <= 1.0:
            raise ConfigurationError("xai.mass_fraction must lie in (0, 1]")
        if self.num_images < 1:
            raise ConfigurationError("xai.num_images must be >= 1")


# train keys owned by other sections
_TRAIN_EXCLUDED = ("seed", "policy", "norm_mean", "norm_std")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig | ExternalWeights = field(default_factory=lambda: toy_config("vit"))
    xai: XaiConfig = field(default_factory=XaiConfig)
    output_dir: str = "runs"
    global_seed: int = 0

    def __post_init__(self):
        if self.data.root is None and not self.data.toy.enabled:
            raise ConfigurationError("set data.root or enable data.toy")
        if self.backbone.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.backbone.arch!r}")

    @property
    def arch(self) -> str:
        return self.backbone.arch

    @property
    def run_tag(self) -> str:
        return f"{self.arch}_{self.train.augmentation}"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_tag

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.global_seed, stage)

    def train_config(self) -> TrainConfig:
        """The train section completed with preprocessing settings and the stage seed."""
        return replace(
            self.train,
            seed=self.stage_seed("train"),
            policy=self.preprocess.policy,
            norm_mean=self.preprocess.norm_mean,
            norm_std=self.preprocess.norm_std,
        )

    def to_dict(self) -> dict:
        train = {k: v for k, v in self.train.to_dict().items() if k not in _TRAIN_EXCLUDED}
        return {
            "data": {
                "root": self.data.root,
                "train_fraction": self.data.train_fraction,
                "toy": {
                    "enabled": self.data.toy.enabled,
                    "n_per_class": {str(k): v for k, v in self.data.toy.n_per_class.items()},
                    "image_side": self.data.toy.image_side,
                },
            },
            "preprocess": {
                "policy": asdict(self.preprocess.policy),
                "norm_mean": list(self.preprocess.norm_mean),
                "norm_std": list(self.preprocess.norm_std),
            },
            "gan": self.gan.to_dict(),
            "train": train,
            "backbone": asdict(self.backbone) if isinstance(self.backbone, ExternalWeights) else self.backbone.to_dict(),
            "xai": asdict(self.xai),
            "output_dir": str(self.output_dir),
            "global_seed": self.global_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(_strict(cls, d, "config"))
        try:
            data = dict(_strict(DataConfig, d.get("data", {}), "data"))
            data["toy"] = ToyConfig(**_strict(ToyConfig, data.get("toy", {}), "data.toy"))
            pre = dict(_strict(PreprocessConfig, d.get("preprocess", {}), "preprocess"))
            if "policy" in pre:
                pol = dict(_strict(AugmentPolicy, pre["policy"], "preprocess.policy"))
                if "crop_scale_range" in pol:
                    pol["crop_scale_range"] = tuple(pol["crop_scale_range"])
                pre["policy"] = AugmentPolicy(**pol)
            train = d.get("train", {})
            clash = set(train) & set(_TRAIN_EXCLUDED)
            if clash:
                raise ConfigurationError(f"train keys {sorted(clash)} belong to preprocess or global_seed")
            bb = d.get("backbone", {"arch": "vit"})
            if "weights" in bb:
                backbone = ExternalWeights(**_strict(ExternalWeights, bb, "backbone"))
            elif set(bb) == {"arch"}:
                backbone = toy_config(bb["arch"])
            else:
                backbone = BackboneConfig.from_dict(bb)
            gan = dict(d.get("gan", {}))
            if "minority_classes" in gan:
                gan["minority_classes"] = tuple(gan["minority_classes"])
            return cls(
                data=DataConfig(**data),
                preprocess=PreprocessConfig(**pre),
                gan=GanConfig.from_dict(gan),
                train=TrainConfig.from_dict(train),
                backbone=backbone,
                xai=XaiConfig(**_strict(XaiConfig, d.get("xai", {}), "xai")),
                output_dir=d.get("output_dir", "runs"),
                global_seed=int(d.get("global_seed", 0)),
            )
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def stage_seed(global_seed: int, stage: str) -> int:
    """``sha256("<global_seed>:<stage>")`` truncated to 31 bits."""
    digest = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def load_config(path, seed: int | None = None, output_dir=None, overrides=()) -> ExperimentConfig:
    """Read a JSON config and apply ``--seed``, ``--output-dir`` and ``key.path=value`` overrides."""
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    for item in overrides:
        apply_override(raw, item)
    if seed is not None:
        raw["global_seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    root = raw.get("data", {}).get("root")
    if root is not None and not Path(root).is_absolute():
        raw["data"]["root"] = str((path.parent / root).resolve())
    return ExperimentConfig.from_dict(raw)


def apply_override(raw: dict, item: str):
    """Set ``a.b.c=value`` in a raw config dict; ``value`` is parsed as JSON when possible."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {item!r} must look like key.path=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = parsed
