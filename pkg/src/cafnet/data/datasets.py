"""Building patch datasets on disk: synthetic devices or a folder of real images."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .manifest import PatchEntry, PatchManifest, extract_patches, make_splits, write_manifest
from .pgm import read_image, write_pgm
from .simulator import SyntheticCameraProfile, default_profiles, synthesize_image

IMAGE_SUFFIXES = (".pgm", ".pnm", ".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")


def worker_count() -> int:
    """Worker threads allowed by ``CAFNET_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CAFNET_THREADS", "1")))
    except ValueError:
        raise ValueError(f"CAFNET_THREADS must be an integer, got {os.environ['CAFNET_THREADS']!r}") from None


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def scene_seed(seed: int, device: int, image: int) -> int:
    """Per-image RNG stream, independent of generation order."""
    return int(np.random.SeedSequence([seed, device, image]).generate_state(1)[0])


def build_synthetic_dataset(out_dir, n_devices: int = 3, images_per_device: int = 60,
                            sigma_prnu: float = 0.02, image_size: int = 128, patch_size: int = 64,
                            stride: int | None = None, seed: int = 0,
                            profiles: list[SyntheticCameraProfile] | None = None,
                            manifest_name: str = "manifest.csv") -> PatchManifest:
    """Render ``images_per_device`` images per simulated device and write patches.

    Splits are drawn per device at the image level (4/6, 1/6, 1/6), so
    every patch inherits its source image's split.
    """
    if n_devices < 2:
        raise ValueError("need at least two devices")
    out_dir = Path(out_dir)
    if profiles is None:
        profiles = default_profiles(n_devices, sigma_prnu, field_size=image_size, seed=seed)
    if len(profiles) != n_devices:
        raise ValueError(f"{len(profiles)} profiles given for {n_devices} devices")
    labels = [f"device_{p.device_id}" for p in profiles]
    jobs = [(d, i) for d in range(n_devices) for i in range(images_per_device)]

    def render(job):
        d, i = job
        img = to_uint8(synthesize_image(profiles[d], scene_seed(seed, d, i), image_size))
        rows = []
        for j, patch in enumerate(extract_patches(img, patch_size, stride)):
            rel = f"patches/{labels[d]}/img{i:04d}_p{j:03d}.pgm"
            try:
                write_pgm(out_dir / rel, patch)
            except OSError as exc:
                raise OSError(f"cannot write patch {out_dir / rel}: {exc}") from exc
            rows.append((rel, labels[d], f"{labels[d]}/img{i:04d}"))
        return rows

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        per_image = list(pool.map(render, jobs))
    rows = [r for image_rows in per_image for r in image_rows]
    assignment = make_splits({image_id: label for _, label, image_id in rows}, seed=seed)
    manifest = PatchManifest(
        [PatchEntry(path, label, image_id, assignment[image_id]) for path, label, image_id in rows],
        labels,
        out_dir,
    )
    write_manifest(manifest, out_dir / manifest_name)
    return manifest


def ingest_images(input_dir, out_dir, patch_size: int = 64, stride: int | None = None, seed: int = 0,
                  manifest_name: str = "manifest.csv") -> PatchManifest:
    """Cut real images into patches.

    ``input_dir`` holds one sub-directory per class (device); every image
    below it is converted to luminance and cropped on a regular grid.
    """
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    classes = sorted(p.name for p in input_dir.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ValueError(f"{input_dir}: expected at least two class sub-directories")
    sources = [
        (label, path)
        for label in classes
        for path in sorted((input_dir / label).rglob("*"))
        if path.suffix.lower() in IMAGE_SUFFIXES
    ]
    empty = [c for c in classes if not any(label == c for label, _ in sources)]
    if empty:
        raise ValueError(f"classes without images: {empty}")

    def cut(item):
        label, path = item
        image_id = f"{label}/{path.relative_to(input_dir / label).with_suffix('').as_posix()}"
        rows = []
        for j, patch in enumerate(extract_patches(read_image(path), patch_size, stride)):
            rel = f"patches/{image_id}_p{j:05d}.pgm"
            write_pgm(out_dir / rel, to_uint8(patch))
            rows.append((rel, label, image_id))
        return rows

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = [r for chunk in pool.map(cut, sources) for r in chunk]
    assignment = make_splits({image_id: label for _, label, image_id in rows}, seed=seed)
    manifest = PatchManifest(
        [PatchEntry(p, label, image_id, assignment[image_id]) for p, label, image_id in rows], classes, out_dir
    )
    write_manifest(manifest, out_dir / manifest_name)
    return manifest
