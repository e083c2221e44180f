"""Patch extraction, image-level splits and the patch manifest."""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .pgm import atomic_write_bytes, read_pgm

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (Fraction(4, 6), Fraction(1, 6), Fraction(1, 6))
MANIFEST_COLUMNS = ("path", "label", "image_id", "split")


class ManifestError(ValueError):
    pass


def extract_patches(image: np.ndarray, patch_size: int = 64, stride: int | None = None) -> list[np.ndarray]:
    """Crop ``patch_size`` squares on a regular grid, row-major.

    ``stride`` defaults to ``patch_size`` (non-overlapping); partial
    patches at the right/bottom border are discarded.
    """
    stride = patch_size if stride is None else stride
    if stride < 1 or patch_size < 1:
        raise ValueError("patch size and stride must be positive")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {image.shape}")
    h, w = image.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} is smaller than the {patch_size}x{patch_size} patch")
    return [
        image[r : r + patch_size, c : c + patch_size].copy()
        for r in range(0, h - patch_size + 1, stride)
        for c in range(0, w - patch_size + 1, stride)
    ]


def _allocate(n: int, ratios) -> list[int]:
    """Largest-remainder split of ``n`` items by ``ratios``."""
    total = sum(Fraction(r) for r in ratios)
    exact = [Fraction(r) / total * n for r in ratios]
    counts = [int(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_splits(image_labels: dict, ratios=DEFAULT_RATIOS, seed: int = 0) -> dict:
    """Assign every source image to train/val/test, stratified by class.

    ``image_labels`` maps image id -> class label.  Images are shuffled per
    class with ``seed`` and cut by the largest-remainder rounding of
    ``ratios``, so six images of one class split 4/1/1.
    """
    if len(ratios) != len(SPLITS):
        raise ValueError("ratios must give train, val and test fractions")
    if not image_labels:
        raise ManifestError("no images to split")
    by_class = defaultdict(list)
    for image_id, label in image_labels.items():
        by_class[label].append(image_id)
    rng = np.random.default_rng(seed)
    assignment = {}
    for label in sorted(by_class, key=str):
        ids = sorted(by_class[label], key=str)
        if len(ids) < 6:
            warnings.warn(f"class {label!r} has only {len(ids)} images; splits will be unbalanced")
        ids = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for split, count in zip(SPLITS, _allocate(len(ids), ratios)):
            for image_id in ids[start : start + count]:
                assignment[image_id] = split
            start += count
    return assignment


@dataclass(frozen=True)
class PatchEntry:
    path: str
    label: str
    image_id: str
    split: str


@dataclass
class PatchManifest:
    """Labeled patch index.  Paths are relative to ``root``."""

    entries: list[PatchEntry]
    labels: list[str]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        self.validate()

    @property
    def label_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.labels)}

    def validate(self) -> None:
        known = set(self.labels)
        if len(known) != len(self.labels):
            raise ManifestError("duplicate label names")
        image_split, image_label = {}, {}
        for e in self.entries:
            if e.label not in known:
                raise ManifestError(f"entry {e.path!r} has unknown label {e.label!r}")
            if e.split not in SPLITS:
                raise ManifestError(f"entry {e.path!r} has invalid split {e.split!r}")
            if image_split.setdefault(e.image_id, e.split) != e.split:
                raise ManifestError(f"source image {e.image_id!r} appears in more than one split")
            if image_label.setdefault(e.image_id, e.label) != e.label:
                raise ManifestError(f"source image {e.image_id!r} carries more than one label")

    def split(self, name: str) -> list[PatchEntry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def image_splits(self) -> dict[str, str]:
        return {e.image_id: e.split for e in self.entries}

    def resplit(self, seed: int, ratios=DEFAULT_RATIOS) -> "PatchManifest":
        """New manifest with image-level splits redrawn from ``seed``."""
        images = {e.image_id: e.label for e in self.entries}
        assignment = make_splits(images, ratios, seed)
        entries = [replace(e, split=assignment[e.image_id]) for e in self.entries]
        return PatchManifest(entries, list(self.labels), self.root)

    def subset(self, labels: list[str]) -> "PatchManifest":
        """Entries of the given classes, relabelled in the given order."""
        keep = set(labels)
        return PatchManifest([e for e in self.entries if e.label in keep], list(labels), self.root)

    def load(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Patches of one split as float64 [N, 1, H, W] in [0, 1] plus label indices."""
        entries = self.split(split)
        index = self.label_index
        if not entries:
            return np.zeros((0, 1, 1, 1)), np.zeros(0, dtype=np.int64)
        arrays = []
        for e in entries:
            img = read_pgm(self.root / e.path)
            scale = 65535.0 if img.dtype == np.uint16 else 255.0
            arrays.append(img.astype(np.float64) / scale)
        x = np.stack(arrays)[:, None]
        y = np.array([index[e.label] for e in entries], dtype=np.int64)
        return x, y

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in self.entries:
            writer.writerow([e.path, e.label, e.image_id, e.split])
        return buf.getvalue()


def labels_path(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".labels.json")


def write_manifest(manifest: PatchManifest, path) -> None:
    """Write the CSV manifest and its ``<stem>.labels.json`` sidecar."""
    atomic_write_bytes(path, manifest.to_csv().encode("utf-8"))
    mapping = {name: i for i, name in enumerate(manifest.labels)}
    atomic_write_bytes(labels_path(path), (json.dumps(mapping, indent=2) + "\n").encode("utf-8"))


def read_manifest(path) -> PatchManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}, got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            entries.append(PatchEntry(*row))
    sidecar = labels_path(path)
    if sidecar.exists():
        mapping = json.loads(sidecar.read_text(encoding="utf-8"))
        labels = [name for name, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
        if sorted(mapping.values()) != list(range(len(labels))):
            raise ManifestError(f"{sidecar}: label indices must be 0..{len(labels) - 1}")
    else:
        labels = sorted({e.label for e in entries})
    try:
        return PatchManifest(entries, labels, path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None
