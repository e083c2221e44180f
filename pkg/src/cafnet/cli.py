"""``cafnet`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, check_compatible, load_checkpoint, save_checkpoint
from .config import COMMANDS, ConfigError, RunConfig, load_config_file, resolve, snapshot_path
from .data.datasets import build_synthetic_dataset, ingest_images, worker_count
from .data.manifest import ManifestError, PatchEntry, PatchManifest, read_manifest, write_manifest
from .data.pgm import PGMError, atomic_write_bytes
from .evaluation import EvalResult, LabelMismatchError, evaluate
from .networks import SpecMismatchError, architecture, build_network
from .optim import TrainingDivergedError
from .report import render_filters, render_table, table_csv
from .training import TrainConfig, finetune, train, write_metrics

log = logging.getLogger("cafnet")

PATH_KEYS = ("input", "manifest", "checkpoint", "out")


def _add(p: argparse.ArgumentParser, *names: str) -> None:
    spec = {
        "input": (["--input"], dict(help="directory with one sub-directory of images per class")),
        "manifest": (["--manifest"], dict(help="patch manifest CSV")),
        "checkpoint": (["--checkpoint"], dict(help="model checkpoint (.cafnet)")),
        "out": (["--out"], dict(help="output directory (manifest path for split)")),
        "arch": (["--arch"], dict(choices=["hp", "ca3", "ca5", "ca7", "caf"])),
        "seed": (["--seed"], dict(type=int)),
        "base_lr": (["--lr"], dict(type=float, dest="base_lr", help="base learning rate")),
        "batch": (["--batch"], dict(type=int, help="mini-batch size")),
        "max_iterations": (["--max-iters"], dict(type=int, dest="max_iterations")),
        "patience": (["--patience"], dict(type=int, help="evaluations without improvement before stopping")),
        "eval_interval": (["--eval-interval"], dict(type=int, help="iterations between validation passes")),
        "early_stopping": (["--no-early-stopping"], dict(action="store_false", dest="early_stopping")),
        "stride": (["--stride"], dict(type=int, help="patch stride (0 means the patch size)")),
        "patch_size": (["--patch-size"], dict(type=int)),
        "devices": (["--devices"], dict(type=int)),
        "images": (["--images"], dict(type=int, help="images per device")),
        "sigma_prnu": (["--sigma-prnu"], dict(type=float)),
        "image_size": (["--image-size"], dict(type=int)),
        "split": (["--split"], dict(choices=["train", "val", "test"])),
        "image_level": (["--image-level"], dict(action="store_true", help="majority vote per source image")),
    }
    for name in names:
        flags, kwargs = spec[name]
        p.add_argument(*flags, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafnet", description="Source-camera identification from image patches.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    groups = {
        "synth": ("out", "devices", "images", "sigma_prnu", "image_size", "patch_size", "stride", "seed"),
        "extract": ("input", "out", "patch_size", "stride", "seed"),
        "split": ("manifest", "out", "seed"),
        "train": ("manifest", "out", "arch", "seed", "base_lr", "batch", "max_iterations", "patience",
                  "eval_interval", "early_stopping", "image_level"),
        "finetune": ("checkpoint", "manifest", "out", "arch", "seed", "base_lr", "batch", "max_iterations",
                     "patience", "eval_interval", "early_stopping", "image_level"),
        "eval": ("checkpoint", "manifest", "out", "split", "image_level"),
        "report": ("out",),
        "viz-filters": ("checkpoint", "out"),
    }
    for command in COMMANDS:
        p = sub.add_parser(command, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value or JSON config file; flags override it")
        _add(p, *groups[command])
        if command == "report":
            p.add_argument("results", nargs="*", help="EvalResult JSON files")
    return parser


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"{cfg.command} needs --{key.replace('_', '-')}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write_snapshot(cfg: RunConfig, where: Path) -> None:
    d = cfg.to_dict()
    for key in PATH_KEYS:
        if d[key]:
            d[key] = str(Path(d[key]).resolve())
    d["results"] = [str(Path(r).resolve()) for r in d["results"]]
    atomic_write_bytes(where, (json.dumps(d, indent=2) + "\n").encode("utf-8"))


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        base_lr=cfg.base_lr, momentum=cfg.momentum, decay_factor=cfg.decay_factor, decay_every=cfg.decay_every,
        max_iterations=cfg.max_iterations, batch_size=cfg.batch, seed=cfg.seed, eval_interval=cfg.eval_interval,
        patience=cfg.patience, early_stopping=cfg.early_stopping,
    )


def _write_eval(result: EvalResult, out: Path) -> None:
    atomic_write_bytes(out / "eval.json", result.to_json().encode("utf-8"))
    atomic_write_bytes(out / "eval.txt", render_table([result]).encode("utf-8"))
    atomic_write_bytes(out / "confusion.csv", result.confusion_csv().encode("utf-8"))


def _finish_training(result, manifest: PatchManifest, cfg: RunConfig, out: Path) -> None:
    save_checkpoint(result.checkpoint, out / "model.cafnet")
    write_metrics(result.metrics, out / "metrics.csv")
    _write_eval(evaluate(result.checkpoint, manifest, "test", image_level=cfg.image_level), out)
    print(f"best iteration {result.best_iteration}, val accuracy {result.best_val_accuracy:.4f}; wrote {out}")


def run_synth(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "out")
    out = Path(cfg.out)
    m = build_synthetic_dataset(out, cfg.devices, cfg.images, cfg.sigma_prnu, cfg.image_size, cfg.patch_size,
                                cfg.stride or None, cfg.seed)
    print(f"wrote {len(m.entries)} patches to {out / 'manifest.csv'}")
    return snapshot_path(out, cfg.command)


def run_extract(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "input", "out")
    out = Path(cfg.out)
    m = ingest_images(_existing(cfg.input, "input directory"), out, cfg.patch_size, cfg.stride or None, cfg.seed)
    print(f"wrote {len(m.entries)} patches to {out / 'manifest.csv'}")
    return snapshot_path(out, cfg.command)


def run_split(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "manifest")
    source = _existing(cfg.manifest, "manifest")
    m = read_manifest(source).resplit(cfg.seed)
    target = Path(cfg.out) if cfg.out else source
    if target.parent.resolve() != source.parent.resolve():
        rel = Path(os.path.relpath(source.parent.resolve(), target.parent.resolve()))
        m = PatchManifest([PatchEntry((rel / e.path).as_posix(), e.label, e.image_id, e.split) for e in m.entries],
                          m.labels, target.parent)
    write_manifest(m, target)
    print(f"wrote {target}")
    return target.parent / f"{target.stem}.{cfg.command}.config.json"


def run_train(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "manifest", "out")
    out = Path(cfg.out)
    manifest = read_manifest(_existing(cfg.manifest, "manifest"))
    net = build_network(architecture(cfg.arch), len(manifest.labels), cfg.seed)
    _finish_training(train(net, manifest, _train_config(cfg)), manifest, cfg, out)
    return snapshot_path(out, cfg.command)


def run_finetune(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "checkpoint", "manifest", "out")
    out = Path(cfg.out)
    ckpt = load_checkpoint(_existing(cfg.checkpoint, "checkpoint"))
    manifest = read_manifest(_existing(cfg.manifest, "manifest"))
    spec = architecture(cfg.arch) if "arch" in explicit else None
    if spec is not None:
        check_compatible(spec, ckpt)
    _finish_training(finetune(ckpt, manifest, _train_config(cfg), spec), manifest, cfg, out)
    return snapshot_path(out, cfg.command)


def run_eval(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "checkpoint", "manifest", "out")
    out = Path(cfg.out)
    ckpt = load_checkpoint(_existing(cfg.checkpoint, "checkpoint"))
    result = evaluate(ckpt, read_manifest(_existing(cfg.manifest, "manifest")), cfg.split, cfg.image_level)
    _write_eval(result, out)
    sys.stdout.write(render_table([result]))
    return snapshot_path(out, cfg.command)


def run_report(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "out")
    if not cfg.results:
        raise ConfigError("report needs at least one EvalResult JSON file")
    out = Path(cfg.out)
    results = []
    for path in cfg.results:
        try:
            results.append(EvalResult.from_dict(json.loads(_existing(path, "result file").read_text())))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: not an evaluation result ({exc})") from None
    text = render_table(results)
    atomic_write_bytes(out / "table.txt", text.encode("utf-8"))
    atomic_write_bytes(out / "table.csv", table_csv(results).encode("utf-8"))
    sys.stdout.write(text)
    return snapshot_path(out, cfg.command)


def run_viz_filters(cfg: RunConfig, explicit: set) -> Path:
    _require(cfg, "checkpoint", "out")
    out = Path(cfg.out)
    ckpt = load_checkpoint(_existing(cfg.checkpoint, "checkpoint"))
    net = ckpt.build_network()
    kernels = net.preprocessing_kernels()
    names = [f"branch{i}_{b.spec.tag}_{k.shape[0]}x{k.shape[1]}" for i, (b, k) in enumerate(zip(net.branches, kernels))]
    for pgm, csv_path in render_filters(kernels, out, names):
        print(f"wrote {pgm} {csv_path}")
    return snapshot_path(out, cfg.command)


HANDLERS = {
    "synth": run_synth,
    "extract": run_extract,
    "split": run_split,
    "train": run_train,
    "finetune": run_finetune,
    "eval": run_eval,
    "report": run_report,
    "viz-filters": run_viz_filters,
}

EXPECTED_ERRORS = (
    ConfigError, ManifestError, CheckpointError, LabelMismatchError, SpecMismatchError, PGMError,
    TrainingDivergedError, FileNotFoundError, OSError, ValueError,
)


def main(argv: list[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose")
    config_path = args.pop("config", None)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = load_config_file(config_path) if config_path else {}
        if "results" in args:
            args["results"] = tuple(args["results"]) or file_values.get("results", ())
        cfg = resolve(command, file_values, args)
        explicit = set(file_values) | set(args)
        with threadpool_limits(limits=worker_count()):
            snapshot = HANDLERS[command](cfg, explicit)
        _write_snapshot(cfg, snapshot)
    except EXPECTED_ERRORS as exc:
        print(f"cafnet {command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
