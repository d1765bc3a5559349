"""Command-line pipeline: prepare, train-gan, synthesize, train, evaluate, explain, report.

Every subcommand reads the same JSON config and works inside
``<output_dir>/<arch>_<augmentation>/``::

    manifests/    manifest_train.csv  manifest_test.csv  weights.json  [manifest_train_cgan.csv]
    gan/          gan.safetensors  gan_loss.csv  <class>/ep<E>_<i>.png
    checkpoints/  best.safetensors  history.csv
    metrics/      metrics.json  confusion_matrix.csv
    xai/          heatmap_<image>_<layer>_<class>.png/.npy  panel_<image>.png  xai_summary.json
    report/       report.md  report.json  *.png
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import backbones as bb
from .cgan import CHECKPOINT, LOSS_CSV, GanError, load_gan, merge_synthetic, train_cgan
from .config import ConfigurationError, ExperimentConfig, ExternalWeights, load_config
from .data import CLASS_NAMES, DataError, Manifest, class_weights, generate_toy_corpus, load_truth, scan_dataset
from .data import stratified_split
from .evaluate import EvaluationError, confusion_matrix, metrics_from_cm, read_metrics, render_report, write_metrics
from .plotting import plot_confusion, plot_gan_losses, plot_history, plot_xai_panel, save_rgb
from .preprocess import normalize
from .train import AUGMENTATIONS, ImageCache, TrainingError, fit, predict_logits, read_history, weighted_ce_torch
from .xai import LayerProbe, ProbeError, explain, localization_score, overlay, resolve_probes, scale_box

log = logging.getLogger("stroketriage")

MODEL_TAGS = {"vit": "ViT", "tnt": "TNT", "convnext": "ConvNext", "maxvit": "MaxViT"}
AUG_TAGS = {"none": "none", "classical": "classical DA", "cgan": "cGAN", "classical+cgan": "classical DA + cGAN"}
SUBDIRS = ("manifests", "gan", "checkpoints", "metrics", "xai", "report")


class DependencyError(RuntimeError):
    """A prerequisite artifact from an earlier subcommand is missing."""


class RunLockedError(RuntimeError):
    pass


def _dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    return {name: cfg.run_dir / name for name in SUBDIRS}


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise DependencyError(f"missing {path}; run `stroketriage {producer}` first")
    return path


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory via ``<run_dir>/.lock`` holding the owner's pid."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise RunLockedError(f"{run_dir} is in use by process {pid} (lockfile {lock})")
            log.warning("removing stale lock %s (pid %s)", lock, pid or "?")
            lock.unlink(missing_ok=True)
    else:
        raise RunLockedError(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- subcommands --------------------------------------------------------------

def cmd_prepare(cfg: ExperimentConfig) -> dict:
    d = _dirs(cfg)
    if cfg.data.toy.enabled:
        root = d["manifests"] / "toy_corpus"
        corpus = generate_toy_corpus(root, cfg.data.toy.n_per_class, cfg.data.toy.image_side, cfg.stage_seed("toy"))
    else:
        if not Path(cfg.data.root).is_dir():
            raise ConfigurationError(f"data.root {cfg.data.root} is not a directory")
        corpus = scan_dataset(cfg.data.root)
    for w in corpus.warnings:
        log.warning("%s", w)
    train_m, test_m = stratified_split(corpus, cfg.data.train_fraction, cfg.stage_seed("split"))
    train_m.to_csv(d["manifests"] / "manifest_train.csv")
    test_m.to_csv(d["manifests"] / "manifest_test.csv")
    weights = class_weights(train_m)
    payload = {
        "classes": list(CLASS_NAMES),
        "train_counts": [train_m.class_counts[c] for c in range(len(CLASS_NAMES))],
        "weights": [float(w) for w in weights],
        "corpus_root": str(Path(corpus.root).resolve()),
    }
    with open(d["manifests"] / "weights.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    log.info("prepared %d train / %d test records", len(train_m), len(test_m))
    return payload


def _load_split(cfg: ExperimentConfig, name: str) -> Manifest:
    return Manifest.from_csv(_require(_dirs(cfg)["manifests"] / f"manifest_{name}.csv", "prepare"))


def cmd_train_gan(cfg: ExperimentConfig):
    d = _dirs(cfg)
    train_m = _load_split(cfg, "train")
    for c in cfg.gan.minority_classes:
        stale = d["gan"] / CLASS_NAMES[c]
        if stale.is_dir():
            for p in stale.glob("ep*_*.png"):
                p.unlink()
    state = train_cgan(train_m, cfg.gan, cfg.stage_seed("gan"), d["gan"])
    log.info("cGAN trained for %d epochs, %d images written", state.epoch, state.saved_images)
    return state


def cmd_synthesize(cfg: ExperimentConfig) -> Manifest:
    d = _dirs(cfg)
    train_m = _load_split(cfg, "train")
    load_gan(_require(d["gan"] / CHECKPOINT, "train-gan"))
    merged = merge_synthetic(train_m, d["gan"], cfg.gan.merge_count_per_class, cfg.gan.minority_classes)
    merged.to_csv(d["manifests"] / "manifest_train_cgan.csv")
    log.info("merged %d synthetic images; class counts %s", len(merged) - len(train_m), merged.class_counts)
    return merged


def _build_model(cfg: ExperimentConfig):
    if isinstance(cfg.backbone, ExternalWeights):
        model = bb.load_external_backbone(cfg.backbone.arch, cfg.backbone.weights, cfg.backbone.registry_map or None)
    else:
        model = bb.build_backbone(cfg.backbone, cfg.stage_seed("init"))
    return bb.replace_head(model, len(CLASS_NAMES))


def cmd_train(cfg: ExperimentConfig):
    d = _dirs(cfg)
    tcfg = cfg.train_config()
    if tcfg.uses_cgan:
        train_m = Manifest.from_csv(_require(d["manifests"] / "manifest_train_cgan.csv", "synthesize"))
    else:
        train_m = _load_split(cfg, "train")
    test_m = _load_split(cfg, "test")
    state = fit(train_m, test_m, _build_model(cfg), tcfg, out_dir=d["checkpoints"])
    best = state.history[state.best_epoch - 1]
    log.info("best epoch %d: test accuracy %.4f", state.best_epoch, best.eval_accuracy)
    return state


def _load_trained(cfg: ExperimentConfig):
    path = _require(_dirs(cfg)["checkpoints"] / "best.safetensors", "train")
    model = bb.load_external_backbone(cfg.arch, path)
    return model.to(cfg.train_config().torch_dtype).eval()


def _weights(cfg: ExperimentConfig) -> np.ndarray:
    with open(_require(_dirs(cfg)["manifests"] / "weights.json", "prepare")) as fh:
        return np.asarray(json.load(fh)["weights"], dtype=np.float64)


def cmd_evaluate(cfg: ExperimentConfig):
    d = _dirs(cfg)
    tcfg = cfg.train_config()
    model = _load_trained(cfg)
    test_m = _load_split(cfg, "test")
    cache = ImageCache(test_m, model.config.image_side)
    logits = predict_logits(model, cache, tcfg)
    per, w = weighted_ce_torch(logits, cache.labels, torch.as_tensor(_weights(cfg)), reduction="none")
    history = read_history(_require(d["checkpoints"] / "history.csv", "train"))
    cm = confusion_matrix(logits.argmax(-1).numpy(), cache.labels.numpy())
    # the loss column is the last epoch's eval loss; the checkpoint's own loss goes in extra
    report = metrics_from_cm(cm, history[-1].eval_loss, MODEL_TAGS[cfg.arch], AUG_TAGS[cfg.train.augmentation])
    report.extra = {
        "run_tag": cfg.run_tag,
        "n_test": len(test_m),
        "checkpoint_loss": float(per.double().sum() / w.double().sum()),
    }
    write_metrics(report, d["metrics"])
    log.info("accuracy %.4f, loss %.4f, macro F1 %.4f", report.accuracy, report.loss, report.macro[2])
    return report


def _probes(cfg: ExperimentConfig, model) -> list[LayerProbe]:
    probes = resolve_probes(model)
    if cfg.xai.probes:
        registry = model.layer_registry
        for name in cfg.xai.probes.values():
            if name not in registry:
                raise ProbeError(f"configured probe {name!r} not in registry: {list(registry)}")
        probes = [LayerProbe(p.depth_tag, cfg.xai.probes.get(p.depth_tag, p.layer_name)) for p in probes]
    return probes


def _truth_boxes(cfg: ExperimentConfig):
    with open(_require(_dirs(cfg)["manifests"] / "weights.json", "prepare")) as fh:
        root = Path(json.load(fh)["corpus_root"])
    if not (root / "toy_truth.json").is_file():
        return {}, None
    return load_truth(root)


def cmd_explain(cfg: ExperimentConfig) -> dict:
    d = _dirs(cfg)
    tcfg = cfg.train_config()
    model = _load_trained(cfg)
    test_m = _load_split(cfg, "test")
    n = min(cfg.xai.num_images, len(test_m))
    pick = sorted(np.random.default_rng(cfg.stage_seed("xai")).choice(len(test_m), size=n, replace=False).tolist())
    sub = Manifest([test_m.records[i] for i in pick], test_m.root)
    cache = ImageCache(sub, model.config.image_side)
    probes = _probes(cfg, model)
    boxes, truth_side = _truth_boxes(cfg)
    side = model.config.image_side

    rows = []
    for i, rec in enumerate(sub.records):
        img = cache.images[i]
        x = normalize(img, tcfg.norm_mean, tcfg.norm_std).to(tcfg.torch_dtype)
        with torch.no_grad():
            pred = int(model(x[None]).argmax())
        box = boxes.get(str(Path(rec.path).resolve()))
        stem = Path(rec.path).stem
        row = {"path": str(rec.path), "label": rec.label, "predicted": pred, "scores": {}, "degenerate": {}}
        overlays, titles = [], []
        for p in probes:
            h = explain(model, x, pred, p, cfg.xai.variant)
            base = f"heatmap_{stem}_{p.layer_name}_{CLASS_NAMES[pred]}"
            ov = overlay(h, img[0], cfg.xai.alpha)
            save_rgb(ov, d["xai"] / f"{base}.png")
            np.save(d["xai"] / f"{base}.npy", h.values)
            overlays.append(ov)
            titles.append(f"{p.depth_tag}: {p.layer_name}")
            row["degenerate"][p.depth_tag] = h.degenerate
            if box is not None:
                score = localization_score(h, scale_box(box, truth_side, side), cfg.xai.mass_fraction)
                row["scores"][p.depth_tag] = score
        plot_xai_panel(img[0].numpy(), overlays, titles, d["xai"] / f"panel_{stem}.png")
        rows.append(row)

    means = {}
    for p in probes:
        vals = [r["scores"][p.depth_tag] for r in rows if p.depth_tag in r["scores"] and r["label"] == r["predicted"]]
        means[p.depth_tag] = float(np.mean(vals)) if vals else None
    summary = {
        "variant": cfg.xai.variant,
        "mass_fraction": cfg.xai.mass_fraction,
        "probes": {p.depth_tag: p.layer_name for p in probes},
        "images": rows,
        "mean_localization_correct": means,
    }
    with open(d["xai"] / "xai_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _run_order(path: Path):
    arch, _, aug = path.parent.parent.name.partition("_")
    return (bb.ARCHS.index(arch) if arch in bb.ARCHS else 99, AUGMENTATIONS.index(aug) if aug in AUGMENTATIONS else 99)


def cmd_report(cfg: ExperimentConfig) -> str:
    """Table over every run under ``output_dir`` plus per-run figures."""
    out = _dirs(cfg)["report"]
    found = sorted(Path(cfg.output_dir).glob("*/metrics/metrics.json"), key=_run_order)
    if not found:
        raise DependencyError(f"no metrics.json under {cfg.output_dir}; run `stroketriage evaluate` first")
    reports = [read_metrics(p) for p in found]
    table = render_report(reports)
    figures = []
    for path, rep in zip(found, reports):
        run = path.parent.parent
        figures.append(plot_confusion(rep.cm, out / f"cm_{run.name}.png", rep.label))
        hist = run / "checkpoints" / "history.csv"
        if hist.is_file():
            figures.append(plot_history(read_history(hist), out / f"history_{run.name}.png", rep.label))
        gan_csv = run / "gan" / LOSS_CSV
        if gan_csv.is_file():
            rows = np.loadtxt(gan_csv, delimiter=",", skiprows=1, ndmin=2)
            if len(rows):
                figures.append(plot_gan_losses(rows, out / f"gan_loss_{run.name}.png"))
    lines = ["# Results", "", table, "## Figures", ""]
    lines += [f"![{f.stem}]({f.name})" for f in figures]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    (out / "report.json").write_text(render_report(reports, format="json") + "\n")
    return table


COMMANDS = {
    "prepare": cmd_prepare,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=None, help="override global_seed")
    common.add_argument("--output-dir", type=Path, default=None, help="override output_dir")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config entry, e.g. train.augmentation=classical (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="stroketriage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, args.seed, args.output_dir, args.overrides)
        with run_lock(cfg.run_dir):
            (cfg.run_dir / "config.json").write_text(cfg.dumps() + "\n")
            result = COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except (RunLockedError, DataError, GanError, TrainingError, EvaluationError, ProbeError,
            bb.SchemaMismatchError, bb.ConfigError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    if args.command == "report":
        print(result, end="")
    else:
        print(f"{args.command}: ok ({cfg.run_dir})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
