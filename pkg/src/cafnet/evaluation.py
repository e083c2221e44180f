"""Accuracy metrics and confusion matrices."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .data.manifest import PatchManifest
from .networks import Network
from .training import normalize_patches


class LabelMismatchError(ValueError):
    pass


@dataclass
class EvalResult:
    """Patch- (or image-) level accuracies for one network on one split.

    ``average`` is the macro accuracy (mean of per-class accuracies over
    classes present in the split); ``micro`` is the overall fraction
    correct, ``trace(confusion) / n_patches``.
    """

    tag: str
    labels: list[str]
    per_class: dict[str, float]
    average: float
    micro: float
    confusion: np.ndarray
    n_patches: int
    split: str = "test"
    level: str = "patch"

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "labels": self.labels,
            "per_class": self.per_class,
            "average": self.average,
            "micro": self.micro,
            "confusion": self.confusion.tolist(),
            "n_patches": self.n_patches,
            "split": self.split,
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(
            tag=d["tag"],
            labels=list(d["labels"]),
            per_class={k: float(v) for k, v in d["per_class"].items()},
            average=float(d["average"]),
            micro=float(d["micro"]),
            confusion=np.array(d["confusion"], dtype=np.int64),
            n_patches=int(d["n_patches"]),
            split=d.get("split", "test"),
            level=d.get("level", "patch"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.labels])
        for name, row in zip(self.labels, self.confusion):
            writer.writerow([name, *row.tolist()])
        return buf.getvalue()


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def evaluate_predictions(y_true, y_pred, labels, tag: str = "", split: str = "test",
                         level: str = "patch") -> EvalResult:
    labels = list(labels)
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.shape[0]} labels but {y_pred.shape[0]} predictions")
    cm = confusion_matrix(y_true, y_pred, len(labels))
    counts = cm.sum(axis=1)
    per_class = {
        name: float(cm[i, i] / counts[i]) if counts[i] else float("nan") for i, name in enumerate(labels)
    }
    present = [v for v in per_class.values() if not np.isnan(v)]
    n = int(cm.sum())
    return EvalResult(
        tag=tag,
        labels=labels,
        per_class=per_class,
        average=float(np.mean(present)) if present else float("nan"),
        micro=float(np.trace(cm) / n) if n else float("nan"),
        confusion=cm,
        n_patches=n,
        split=split,
        level=level,
    )


def majority_vote(image_ids, predictions, n_classes: int):
    """Per-image majority vote; ties go to the lowest class index."""
    groups: dict = {}
    for image_id, pred in zip(image_ids, predictions):
        groups.setdefault(image_id, []).append(int(pred))
    ids = list(groups)
    votes = [int(np.argmax(np.bincount(groups[i], minlength=n_classes))) for i in ids]
    return ids, np.array(votes, dtype=np.int64)


def evaluate(source: Network | Checkpoint, manifest: PatchManifest, split: str = "test",
             image_level: bool = False, labels: list[str] | None = None) -> EvalResult:
    """Inference-mode accuracy of a network or checkpoint on one manifest split."""
    if isinstance(source, Checkpoint):
        net, labels = source.build_network(), source.labels
    else:
        net, labels = source, list(labels or manifest.labels)
    if list(labels) != list(manifest.labels):
        raise LabelMismatchError(f"model labels {list(labels)} differ from manifest labels {manifest.labels}")
    entries = manifest.split(split)
    x, y = manifest.load(split)
    pred = net.predict(normalize_patches(x)) if len(y) else np.zeros(0, dtype=np.int64)
    if not image_level:
        return evaluate_predictions(y, pred, labels, net.tag, split, "patch")
    image_ids = [e.image_id for e in entries]
    truth = dict(zip(image_ids, y.tolist()))
    ids, votes = majority_vote(image_ids, pred, len(labels))
    return evaluate_predictions([truth[i] for i in ids], votes, labels, net.tag, split, "image")
