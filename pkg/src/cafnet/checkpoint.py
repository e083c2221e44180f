"""``.cafnet`` checkpoint files.

Layout (all integers little-endian)::

    b"CAFN" | u32 version | u32 header length | JSON header | u32 CRC32(header)
    section payloads (raw float64 LE), each followed by u32 CRC32(payload)
    u32 CRC32 of everything before it

The header holds the network spec, label names, optimizer scalars, RNG
state and the section table (name, kind, shape).  Loading validates every
checksum before any object is built, so a damaged file never yields a
partially populated checkpoint.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.pgm import atomic_write_bytes
from .networks import (
    FusionSpec,
    Network,
    NetworkSpec,
    SpecMismatchError,
    spec_from_dict,
    spec_to_dict,
)
from .optim import SgdState

MAGIC = b"CAFN"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    labels: list[str]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    sgd: SgdState = field(default_factory=SgdState)
    seed: int = 0
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def tag(self) -> str:
        return self.spec.tag

    @classmethod
    def from_network(cls, net: Network, labels, sgd: SgdState | None = None,
                     rng: np.random.Generator | None = None, metadata: dict | None = None) -> "Checkpoint":
        labels = list(labels)
        if len(labels) != net.n_classes:
            raise ValueError(f"{len(labels)} label names for a {net.n_classes}-class network")
        return cls(
            spec=net.spec,
            labels=labels,
            params={k: v.copy() for k, v in net.parameters().items()},
            buffers={k: v.copy() for k, v in net.buffers().items()},
            sgd=sgd.copy() if sgd is not None else SgdState(),
            seed=net.seed,
            rng_state=rng.bit_generator.state if rng is not None else None,
            metadata=dict(metadata or {}),
        )

    def build_network(self) -> Network:
        net = Network(self.spec, self.n_classes, self.seed)
        net.load_state(self.params, self.buffers)
        return net


def _kernel_sizes(spec: NetworkSpec) -> list[int]:
    branches = spec.branches if isinstance(spec, FusionSpec) else (spec,)
    return [b.preprocessing.kernel_size for b in branches]


def check_compatible(requested: NetworkSpec, checkpoint: Checkpoint) -> None:
    """Raise :class:`SpecMismatchError` unless ``requested`` matches the checkpoint's backbone."""
    if requested == checkpoint.spec:
        return
    have, want = checkpoint.spec, requested
    raise SpecMismatchError(
        f"checkpoint holds a {have.tag} network (preprocessing kernel sizes {_kernel_sizes(have)}) "
        f"but a {want.tag} network was requested (preprocessing kernel sizes {_kernel_sizes(want)})"
    )


def load_into(net: Network, checkpoint: Checkpoint, include_head: bool = True) -> None:
    check_compatible(net.spec, checkpoint)
    net.load_state(checkpoint.params, checkpoint.buffers, include_head=include_head)


def _sections(ckpt: Checkpoint):
    for kind, table in (("param", ckpt.params), ("buffer", ckpt.buffers), ("velocity", ckpt.sgd.velocity)):
        for name, arr in table.items():
            yield kind, name, np.ascontiguousarray(arr, dtype="<f8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sections = list(_sections(ckpt))
    header = {
        "format": "cafnet",
        "spec": spec_to_dict(ckpt.spec),
        "labels": ckpt.labels,
        "seed": ckpt.seed,
        "sgd": ckpt.sgd.scalars(),
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "sections": [{"kind": k, "name": n, "shape": list(a.shape)} for k, n, a in sections],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(hbytes)), hbytes, _U32.pack(zlib.crc32(hbytes))]
    for _, _, arr in sections:
        payload = arr.tobytes()
        parts += [payload, _U32.pack(zlib.crc32(payload))]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        if data[:4] == MAGIC:
            raise ChecksumError("checkpoint truncated")
        raise CheckpointError("not a cafnet checkpoint (bad magic bytes)")
    (version,) = _U32.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    (trailer,) = _U32.unpack_from(data, len(data) - 4)
    if zlib.crc32(data[:-4]) != trailer:
        raise ChecksumError("checkpoint checksum mismatch (file is truncated or corrupt)")
    (hlen,) = _U32.unpack_from(data, 8)
    pos = 12
    hbytes = data[pos : pos + hlen]
    pos += hlen
    if len(hbytes) != hlen or zlib.crc32(hbytes) != _U32.unpack_from(data, pos)[0]:
        raise ChecksumError("checkpoint header checksum mismatch")
    pos += 4
    header = json.loads(hbytes.decode("utf-8"))
    tables = {"param": {}, "buffer": {}, "velocity": {}}
    for sec in header["sections"]:
        shape = tuple(sec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        payload = data[pos : pos + nbytes]
        pos += nbytes
        if len(payload) != nbytes or pos + 4 > len(data) - 4:
            raise ChecksumError(f"section {sec['name']!r} truncated")
        if zlib.crc32(payload) != _U32.unpack_from(data, pos)[0]:
            raise ChecksumError(f"section {sec['name']!r} checksum mismatch")
        pos += 4
        tables[sec["kind"]][sec["name"]] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data) - 4:
        raise ChecksumError("unexpected trailing bytes in checkpoint")
    sgd = SgdState(**header["sgd"], velocity=tables["velocity"])
    return Checkpoint(
        spec=spec_from_dict(header["spec"]),
        labels=list(header["labels"]),
        params=tables["param"],
        buffers=tables["buffer"],
        sgd=sgd,
        seed=header["seed"],
        rng_state=header["rng_state"],
        metadata=header["metadata"],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except CheckpointError as exc:
        raise type(exc)(f"{path}: {exc}") from None
