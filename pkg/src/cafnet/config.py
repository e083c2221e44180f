"""Run configuration: defaults, config files and flag overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .networks import ARCHITECTURE_TAGS

COMMANDS = ("synth", "extract", "split", "train", "finetune", "eval", "report", "viz-filters")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    # paths
    input: str = ""
    manifest: str = ""
    checkpoint: str = ""
    out: str = ""
    results: tuple = ()
    # model and optimizer
    arch: str = "caf"
    base_lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.9
    decay_every: int = 10000
    batch: int = 64
    max_iterations: int = 500000
    seed: int = 0
    patience: int = 20
    eval_interval: int = 100
    early_stopping: bool = True
    # evaluation
    split: str = "test"
    image_level: bool = False
    # data
    devices: int = 3
    images: int = 60
    sigma_prnu: float = 0.02
    image_size: int = 128
    patch_size: int = 64
    stride: int = 0

    def validate(self) -> "RunConfig":
        if self.command and self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.arch not in ARCHITECTURE_TAGS:
            raise ConfigError(f"invalid architecture tag {self.arch!r}; choose from {', '.join(ARCHITECTURE_TAGS)}")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"invalid split {self.split!r}")
        for name in ("batch", "eval_interval", "devices", "images", "image_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch < 2:
            raise ConfigError("batch must be at least 2")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.stride < 0:
            raise ConfigError(f"stride must be >= 0, got {self.stride}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["results"] = list(self.results)
        return d


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
ALIASES = {"lr": "base_lr", "max_iters": "max_iterations", "batch_size": "batch"}


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return ALIASES.get(key, key)


def coerce(key: str, value, where: str = ""):
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            if isinstance(value, str):
                return tuple(v.strip() for v in value.split(",") if v.strip())
            return tuple(str(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}invalid value {value!r} for {key} (expected {kind})") from None


def _check_key(raw: str, where: str) -> str:
    key = canonical_key(raw)
    if key not in FIELD_TYPES:
        raise ConfigError(f"{where}unknown key {raw.strip()!r}")
    return key


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse a JSON object or ``key = value`` lines (``#`` comments allowed)."""
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")
        out = {}
        for raw, value in data.items():
            key = _check_key(raw, f"{source}: ")
            out[key] = coerce(key, value, f"{source}: ")
        return out
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}: "
        if "=" not in stripped:
            raise ConfigError(f"{where}expected key = value, got {stripped!r}")
        raw, value = stripped.split("=", 1)
        key = _check_key(raw, where)
        out[key] = coerce(key, value.strip(), where)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def resolve(command: str, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config-file values, then explicit flags."""
    values = {**(file_values or {}), **(overrides or {})}
    if values.get("command", command) != command:
        raise ConfigError(f"config is for command {values['command']!r}, not {command!r}")
    values["command"] = command
    return RunConfig(**values).validate()


def snapshot_path(out: Path, command: str) -> Path:
    return out / f"{command}.config.json"
