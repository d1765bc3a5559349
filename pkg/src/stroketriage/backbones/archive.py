"""Parameter archives: safetensors files whose metadata echoes the config.

The file holds every tensor of the model's ``state_dict`` plus a JSON
``config`` entry and any caller-supplied string metadata.  All metadata is
packed into one sorted JSON header entry because safetensors does not keep
a stable order across several entries; saving the same parameters and
metadata twice then gives identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
import torch.nn as nn
from safetensors import safe_open
from safetensors.torch import save_file

from .common import Backbone, BackboneConfig, ConfigError

FORMAT = "stroketriage-params/1"
META_KEY = "stroketriage"


class SchemaMismatchError(ValueError):
    pass


def save_params(path, tensors: dict[str, torch.Tensor], metadata: dict[str, str] | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT}
    for k in sorted(metadata or {}):
        meta[k] = str(metadata[k])
    packed = {META_KEY: json.dumps(meta, sort_keys=True)}
    save_file({k: v.detach().contiguous() for k, v in tensors.items()}, str(path), metadata=packed)


def load_params(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        meta = dict(fh.metadata() or {})
        if META_KEY in meta:
            meta = json.loads(meta.pop(META_KEY)) | meta
        for k in fh.keys():
            tensors[k] = fh.get_tensor(k)
    return tensors, meta


def save_backbone(model: Backbone, path, extra: dict[str, str] | None = None):
    meta = dict(extra or {})
    meta["config"] = json.dumps(model.config.to_dict(), sort_keys=True)
    meta["layer_names"] = json.dumps([t.name for t in model._taps])
    if model.head is not None:
        meta["num_classes"] = str(model.head.out_features)
    save_params(path, model.state_dict(), meta)


def schema_diff(expected: dict[str, torch.Tensor], found: dict[str, torch.Tensor]) -> list[str]:
    problems = []
    for name in sorted(set(expected) - set(found)):
        problems.append(f"missing parameter {name!r} {tuple(expected[name].shape)}")
    for name in sorted(set(found) - set(expected)):
        problems.append(f"unexpected parameter {name!r} {tuple(found[name].shape)}")
    for name in sorted(set(expected) & set(found)):
        if expected[name].shape != found[name].shape:
            problems.append(
                f"shape mismatch for {name!r}: model {tuple(expected[name].shape)}, file {tuple(found[name].shape)}"
            )
    return problems


def load_external_backbone(arch: str, weights_path, registry_map: dict[str, str] | None = None, config=None):
    """Rebuild a backbone from an archive and check it against ``arch``'s schema.

    ``config`` overrides the echo stored in the file (needed for archives
    written by other tools).  ``registry_map`` renames registry layers, e.g.
    ``{"stages.3.blocks.0": "stages.3.blocks.1.conv.conv2_kxk"}``.
    """
    from . import build_backbone, replace_head

    tensors, meta = load_params(weights_path)
    if config is None:
        if "config" not in meta:
            raise SchemaMismatchError(f"{weights_path} carries no config echo; pass config= explicitly")
        config = BackboneConfig.from_dict(json.loads(meta["config"]))
    elif isinstance(config, dict):
        config = BackboneConfig.from_dict(config)
    if config.arch != arch:
        raise SchemaMismatchError(f"declared arch {arch!r} but archive describes {config.arch!r}")

    model = build_backbone(config)
    if "head.weight" in tensors:
        replace_head(model, tensors["head.weight"].shape[0])
    problems = schema_diff(model.state_dict(), tensors)
    if problems:
        raise SchemaMismatchError(f"{weights_path} does not match the {arch} schema:\n  " + "\n  ".join(problems))
    model.load_state_dict(tensors, strict=True)
    if "layer_names" in meta:
        names = json.loads(meta["layer_names"])
        if len(names) == len(model._taps):
            for tap, name in zip(model._taps, names):
                tap.name = name
    if registry_map:
        model.rename_layers(registry_map)
    return model
