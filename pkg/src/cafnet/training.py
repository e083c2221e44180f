"""Training loop, fine-tuning and the metrics log."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint, check_compatible
from .data.manifest import ManifestError, PatchManifest
from .data.pgm import atomic_write_bytes
from .networks import Network, NetworkSpec
from .optim import SgdState, init_state, step

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "lr", "train_loss", "val_accuracy")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.9
    decay_every: int = 10000
    max_iterations: int = 500000
    batch_size: int = 64
    seed: int = 0
    eval_interval: int = 100
    patience: int = 20
    early_stopping: bool = True

    def sgd_settings(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "decay_factor": self.decay_factor,
            "decay_every": self.decay_every,
            "max_iterations": self.max_iterations,
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_val_accuracy: float = float("nan")
    iterations_run: int = 0
    stopped_early: bool = False

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow([row["iteration"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_accuracy"])])
    return buf.getvalue()


def write_metrics(rows: list[dict], path) -> None:
    atomic_write_bytes(path, metrics_to_csv(rows).encode("utf-8"))


def normalize_patches(x: np.ndarray) -> np.ndarray:
    """Remove each patch's mean intensity (network input convention)."""
    return x - x.mean(axis=(2, 3), keepdims=True)


def load_split(manifest: PatchManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    x, y = manifest.load(split)
    return (normalize_patches(x) if len(x) else x), y


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 128) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(net.predict(x, batch_size) == y))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled mini-batches; a trailing batch of one sample is dropped."""
    epoch = 0
    while True:
        order = rng.permutation(n)
        for i, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            if len(idx) >= 2:
                yield f"{epoch}:{i}", idx
        epoch += 1


def _snapshot(net: Network, state: SgdState):
    return (
        {k: v.copy() for k, v in net.parameters().items()},
        {k: v.copy() for k, v in net.buffers().items()},
        state.copy(),
    )


def train(net: Network, manifest: PatchManifest, config: TrainConfig | None = None,
          labels: list[str] | None = None, state: SgdState | None = None,
          metadata: dict | None = None) -> TrainResult:
    """Train ``net`` on the manifest's train split, selecting on validation accuracy.

    Evaluates every ``config.eval_interval`` steps (and after the last one);
    with early stopping on, training halts after ``config.patience``
    evaluations without a new best.  The returned checkpoint holds the
    best-validation parameters, which are also restored into ``net``.
    """
    config = config or TrainConfig()
    labels = list(labels or manifest.labels)
    if len(labels) != net.n_classes:
        raise ValueError(f"network has {net.n_classes} outputs but the manifest has {len(labels)} labels")
    x_train, y_train = load_split(manifest, "train")
    x_val, y_val = load_split(manifest, "val")
    if len(y_train) == 0:
        raise ManifestError("training split is empty")
    if len(y_val) == 0:
        raise ManifestError("validation split is empty")
    missing = sorted(set(range(len(labels))) - set(y_train.tolist()))
    if missing:
        raise ManifestError(f"classes absent from the training split: {[labels[i] for i in missing]}")
    if config.eval_interval < 1 or config.batch_size < 2:
        raise ValueError("eval_interval must be >= 1 and batch_size >= 2")

    state = state or init_state(net.trainable(), **config.sgd_settings())
    rng = np.random.default_rng([config.seed, 0x7452])
    meta = {"arch": net.tag, **(metadata or {})}
    result = TrainResult(checkpoint=Checkpoint.from_network(net, labels, state, rng, meta))
    if config.max_iterations <= 0:
        return result

    best = None
    best_acc, best_iter, stale = -1.0, 0, 0
    losses: list[float] = []
    batches = _batches(len(y_train), config.batch_size, rng)
    for it in range(1, config.max_iterations + 1):
        batch_id, idx = next(batches)
        losses.append(step(net, x_train[idx], y_train[idx], state, batch_id))
        if it % config.eval_interval and it != config.max_iterations:
            continue
        val_acc = accuracy(net, x_val, y_val)
        row = {"iteration": it, "lr": state.lr(it - 1), "train_loss": float(np.mean(losses)), "val_accuracy": val_acc}
        result.metrics.append(row)
        log.info("iter %d lr %.5g loss %.4f val %.4f", it, row["lr"], row["train_loss"], val_acc)
        losses = []
        if val_acc > best_acc:
            best_acc, best_iter, stale = val_acc, it, 0
            best = _snapshot(net, state)
        else:
            stale += 1
            if config.early_stopping and stale >= config.patience:
                result.stopped_early = True
                break
    result.iterations_run = it
    params, buffers, best_state = best
    net.load_state(params, buffers)
    result.checkpoint = Checkpoint.from_network(
        net, labels, best_state, rng, {**meta, "best_iteration": best_iter, "best_val_accuracy": best_acc}
    )
    result.best_iteration, result.best_val_accuracy = best_iter, best_acc
    return result


def finetune(checkpoint: Checkpoint, manifest: PatchManifest, config: TrainConfig | None = None,
             spec: NetworkSpec | None = None) -> TrainResult:
    """Continue training a checkpoint on a new task.

    The backbone comes from ``checkpoint``; the dense head is kept only when
    the new label list equals the checkpoint's, and is otherwise re-drawn
    from ``config.seed``.  Optimizer state starts fresh.
    """
    config = config or TrainConfig()
    if spec is not None:
        check_compatible(spec, checkpoint)
    labels = list(manifest.labels)
    net = Network(checkpoint.spec, len(labels), checkpoint.seed)
    same_task = labels == checkpoint.labels
    net.load_state(checkpoint.params, checkpoint.buffers, include_head=same_task)
    if not same_task:
        net.head = net.new_head(np.random.default_rng([config.seed, 0x4844]))
    meta = {"finetuned_from": checkpoint.tag, "source_labels": checkpoint.labels, "head_reinitialized": not same_task}
    return train(net, manifest, config, labels=labels, metadata=meta)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
