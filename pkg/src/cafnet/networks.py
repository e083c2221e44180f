"""Single-branch (HP / CA-k) and three-branch fusion networks.

A branch is a one-plane preprocessing convolution followed by basic units
(conv -> batch norm -> ReLU -> 2x2 average pool) and global average
pooling.  Single-branch networks put a dense softmax head on the branch
features; the fusion network concatenates the features of three learnable
branches (kernel sizes 3, 5, 7) before a shared head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .layers import CNHW, TRAIN, AvgPool2D, BatchNorm2D, Conv2D, Dense, GlobalAvgPool, ReLU
from .tensor import DTYPE, ShapeError

HIGHPASS_KERNEL = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=DTYPE,
) / 12.0

UNIT_CHANNELS = (8, 16, 32, 64, 128)
PATCH_SIZE = 64
FIXED_HIGHPASS = "fixed_highpass"
LEARNABLE = "learnable"


class SpecMismatchError(ValueError):
    """Raised when parameters are loaded into an incompatible architecture."""


@dataclass(frozen=True)
class Preprocessing:
    kind: str
    kernel_size: int

    def __post_init__(self):
        if self.kind == FIXED_HIGHPASS:
            if self.kernel_size != 5:
                raise ValueError("the fixed high-pass preprocessing kernel is 5x5")
        elif self.kind == LEARNABLE:
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError(f"learnable preprocessing kernel must be odd, got {self.kernel_size}")
        else:
            raise ValueError(f"unknown preprocessing kind {self.kind!r}")

    @classmethod
    def highpass(cls) -> "Preprocessing":
        return cls(FIXED_HIGHPASS, 5)

    @classmethod
    def learnable(cls, kernel_size: int) -> "Preprocessing":
        return cls(LEARNABLE, kernel_size)


@dataclass(frozen=True)
class BranchSpec:
    preprocessing: Preprocessing
    unit_channels: tuple[int, ...] = UNIT_CHANNELS
    input_size: int = PATCH_SIZE
    unit_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "unit_channels", tuple(int(c) for c in self.unit_channels))
        if not self.unit_channels:
            raise ValueError("a branch needs at least one basic unit")
        if self.input_size % (2 ** len(self.unit_channels)):
            raise ValueError(
                f"input size {self.input_size} is not divisible by 2^{len(self.unit_channels)}"
            )

    @property
    def feature_dim(self) -> int:
        return self.unit_channels[-1]

    @property
    def tag(self) -> str:
        if self.preprocessing.kind == FIXED_HIGHPASS:
            return "hp"
        return f"ca{self.preprocessing.kernel_size}"


@dataclass(frozen=True)
class FusionSpec:
    branches: tuple[BranchSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if len(self.branches) < 2:
            raise ValueError("a fusion network needs at least two branches")
        if len({b.input_size for b in self.branches}) != 1:
            raise ValueError("fusion branches must share one input size")

    @property
    def feature_dim(self) -> int:
        return sum(b.feature_dim for b in self.branches)

    @property
    def input_size(self) -> int:
        return self.branches[0].input_size

    @property
    def tag(self) -> str:
        return "caf"


NetworkSpec = Union[BranchSpec, FusionSpec]
ARCHITECTURE_TAGS = ("hp", "ca3", "ca5", "ca7", "caf")
DISPLAY_NAMES = {"hp": "HP-CNN", "ca3": "CA3-CNN", "ca5": "CA5-CNN", "ca7": "CA7-CNN", "caf": "CAF-CNN"}


def architecture(tag: str, unit_channels=UNIT_CHANNELS, input_size: int = PATCH_SIZE) -> NetworkSpec:
    """Spec for one of the tags ``hp``, ``ca3``, ``ca5``, ``ca7``, ``caf``."""
    tag = tag.lower()
    kw = {"unit_channels": tuple(unit_channels), "input_size": input_size}
    if tag == "hp":
        return BranchSpec(Preprocessing.highpass(), **kw)
    if tag in ("ca3", "ca5", "ca7"):
        return BranchSpec(Preprocessing.learnable(int(tag[2])), **kw)
    if tag == "caf":
        return FusionSpec(tuple(BranchSpec(Preprocessing.learnable(k), **kw) for k in (3, 5, 7)))
    raise ValueError(f"unknown architecture tag {tag!r}; expected one of {ARCHITECTURE_TAGS}")


def spec_to_dict(spec: NetworkSpec) -> dict:
    def branch(b: BranchSpec) -> dict:
        return {
            "preprocessing": b.preprocessing.kind,
            "kernel_size": b.preprocessing.kernel_size,
            "unit_channels": list(b.unit_channels),
            "input_size": b.input_size,
            "unit_kernel": b.unit_kernel,
        }

    if isinstance(spec, FusionSpec):
        return {"type": "fusion", "branches": [branch(b) for b in spec.branches]}
    return {"type": "branch", **branch(spec)}


def spec_from_dict(d: dict) -> NetworkSpec:
    def branch(b: dict) -> BranchSpec:
        return BranchSpec(
            Preprocessing(b["preprocessing"], int(b["kernel_size"])),
            unit_channels=tuple(b["unit_channels"]),
            input_size=int(b["input_size"]),
            unit_kernel=int(b["unit_kernel"]),
        )

    if d.get("type") == "fusion":
        return FusionSpec(tuple(branch(b) for b in d["branches"]))
    if d.get("type") == "branch":
        return branch(d)
    raise ValueError(f"unrecognised network spec {d!r}")


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Branch:
    """Preprocessing conv, basic units and global average pooling."""

    def __init__(self, spec: BranchSpec, rng: np.random.Generator):
        self.spec = spec
        pre = spec.preprocessing
        if pre.kind == FIXED_HIGHPASS:
            self.pre = Conv2D(HIGHPASS_KERNEL.reshape(1, 1, 5, 5).copy(), trainable=False, layout=CNHW)
        else:
            k = pre.kernel_size
            self.pre = Conv2D(_he(rng, (1, 1, k, k), k * k), layout=CNHW)
        self.units: list[tuple[Conv2D, BatchNorm2D, ReLU, AvgPool2D]] = []
        in_ch, k = 1, spec.unit_kernel
        for out_ch in spec.unit_channels:
            conv = Conv2D(_he(rng, (out_ch, in_ch, k, k), in_ch * k * k), layout=CNHW)
            self.units.append((conv, BatchNorm2D(out_ch, layout=CNHW), ReLU(), AvgPool2D(2)))
            in_ch = out_ch
        self.gap = GlobalAvgPool(layout=CNHW)

    def named_layers(self):
        yield "pre", self.pre
        for i, (conv, bn, _, _) in enumerate(self.units, start=1):
            yield f"unit{i}.conv", conv
            yield f"unit{i}.bn", bn

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        # activations stay channel-major (C, N, H, W) inside the branch
        h = self.pre.forward(x.reshape(1, x.shape[0], *x.shape[2:]), mode)
        for unit in self.units:
            for layer in unit:
                h = layer.forward(h, mode)
        return self.gap.forward(h, mode)

    def backward(self, grad_features: np.ndarray) -> None:
        g = self.gap.backward(grad_features)
        for unit in reversed(self.units):
            for layer in reversed(unit):
                g = layer.backward(g)
        self.pre.backward(g, need_input_grad=False)


class Network:
    """Classifier built from a :class:`BranchSpec` or :class:`FusionSpec`."""

    def __init__(self, spec: NetworkSpec, n_classes: int, seed: int = 0):
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        self.spec = spec
        self.n_classes = int(n_classes)
        self.seed = seed
        rng = np.random.default_rng(seed)
        branch_specs = spec.branches if isinstance(spec, FusionSpec) else (spec,)
        self.branches = [Branch(b, rng) for b in branch_specs]
        self.head = self.new_head(rng)

    def new_head(self, rng: np.random.Generator) -> Dense:
        dim = self.spec.feature_dim
        return Dense(_he(rng, (self.n_classes, dim), dim), np.zeros(self.n_classes))

    @property
    def tag(self) -> str:
        return self.spec.tag

    @property
    def input_size(self) -> int:
        return self.spec.input_size

    def named_layers(self):
        for i, branch in enumerate(self.branches):
            for name, layer in branch.named_layers():
                yield f"branch{i}.{name}", layer
        yield "head", self.head

    def parameters(self) -> dict[str, np.ndarray]:
        """All parameter arrays by name (frozen ones included), in a fixed order."""
        return {
            f"{lname}.{pname}": arr
            for lname, layer in self.named_layers()
            for pname, arr in layer.params.items()
        }

    def trainable(self) -> dict[str, np.ndarray]:
        return {
            f"{lname}.{pname}": arr
            for lname, layer in self.named_layers()
            if getattr(layer, "trainable", True)
            for pname, arr in layer.params.items()
        }

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            f"{lname}.{pname}": layer.grads[pname]
            for lname, layer in self.named_layers()
            if getattr(layer, "trainable", True)
            for pname in layer.params
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{lname}.{bname}": arr
            for lname, layer in self.named_layers()
            for bname, arr in getattr(layer, "buffers", {}).items()
        }

    def _check_input(self, x: np.ndarray) -> None:
        s = self.input_size
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ShapeError(f"network expects input of shape [N, 1, {s}, {s}], got {x.shape}")

    def features(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        self._check_input(x)
        feats = [branch.forward(x, mode) for branch in self.branches]
        return feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        return self.head.forward(self.features(x, mode), mode)

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        g = self.head.backward(grad_logits)
        start = 0
        for branch in self.branches:
            stop = start + branch.spec.feature_dim
            branch.backward(np.ascontiguousarray(g[:, start:stop]))
            start = stop
        return self.gradients()

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size], "inference").argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def preprocessing_kernels(self) -> list[np.ndarray]:
        return [b.pre.weights[0, 0].copy() for b in self.branches]

    def load_state(self, params: dict, buffers: dict, include_head: bool = True) -> None:
        """Copy arrays into this network in place, checking names and shapes."""
        own_p, own_b = self.parameters(), self.buffers()
        for source, own in ((params, own_p), (buffers, own_b)):
            for name, arr in own.items():
                if not include_head and name.startswith("head."):
                    continue
                if name not in source:
                    raise SpecMismatchError(f"missing tensor {name!r} in source state")
                value = np.asarray(source[name], dtype=DTYPE)
                if value.shape != arr.shape:
                    raise SpecMismatchError(f"tensor {name!r}: shape {value.shape} != {arr.shape}")
                arr[...] = value


def build_network(spec: NetworkSpec, n_classes: int, seed: int = 0) -> Network:
    return Network(spec, n_classes, seed)


def forward(net: Network, batch: np.ndarray, mode: str = TRAIN) -> np.ndarray:
    return net.forward(batch, mode)


def backward(net: Network, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    return net.backward(grad_logits)


def export_preprocessing_kernels(net: Network) -> list[np.ndarray]:
    return net.preprocessing_kernels()
