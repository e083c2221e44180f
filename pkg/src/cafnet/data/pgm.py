"""Binary PGM (P5) reading and writing, plus PNG ingestion via Pillow."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\r\n"


class PGMError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pgm(image: np.ndarray, maxval: int = 255) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise PGMError(f"PGM images are 2-D, got shape {image.shape}")
    if not 0 < maxval < 65536:
        raise PGMError(f"maxval must be in 1..65535, got {maxval}")
    if image.size and (image.min() < 0 or image.max() > maxval):
        raise PGMError(f"pixel values must lie in [0, {maxval}]")
    h, w = image.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(image, dtype=dtype).tobytes()


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    atomic_write_bytes(path, encode_pgm(image, maxval))


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a P5 byte string to a uint8 (maxval < 256) or uint16 array."""
    if data[:2] != b"P5":
        raise PGMError("not a binary PGM (missing 'P5' magic)")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1] in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE:
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # exactly one whitespace byte before the raster
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise PGMError(f"invalid PGM header: {w}x{h}, maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise PGMError(f"PGM raster truncated: expected {need} bytes, got {len(raster)}")
    img = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def to_gray(image: np.ndarray) -> np.ndarray:
    """Float luminance in [0, 1]; RGB(A) input uses BT.601 weights."""
    img = np.asarray(image)
    scale = 65535.0 if img.dtype == np.uint16 else 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    elif img.ndim != 2:
        raise PGMError(f"unsupported image shape {img.shape}")
    return img


def read_image(path) -> np.ndarray:
    """Read a PGM or any Pillow-supported image as float luminance in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return to_gray(read_pgm(path))
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.uint16)
        else:
            arr = np.asarray(im.convert("RGB"))
    return to_gray(arr)
