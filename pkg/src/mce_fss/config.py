"""Tree-structured run configuration loaded from YAML.

Every field has a default; unknown keys are rejected. ``fingerprint`` is a
stable 64-bit hash of the canonical JSON form and is stored in checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import SyntheticTaskConfig
from .model import ABLATIONS, ModelConfig
from .train import EvalConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    variants: tuple[str, ...] = tuple(ABLATIONS)
    folds: tuple[int, ...] = (0, 1, 2, 3)
    eval_shots: tuple[int, ...] = (1,)

    def __post_init__(self):
        for name in ("variants", "folds", "eval_shots"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.variants) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation variants {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    dataset: SyntheticTaskConfig = SyntheticTaskConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    ablation: AblationConfig = AblationConfig()
    fold: int = 0
    n_folds: int = 4
    shots: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def fingerprint(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _coerce(value, default, where: str):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        if isinstance(value, str):  # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
        if ok and default:
            value = tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where} should be {type(default).__name__}, got {value!r}")
    return value


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        else:
            kwargs[name] = _coerce(value, default, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from None


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
