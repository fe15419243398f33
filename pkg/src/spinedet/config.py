"""Layered run configuration: defaults < YAML file < ``SPINEDET_*`` env vars < dotted overrides."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict
from pathlib import Path

import yaml

from .decode import DecodeConfig
from .trainer import desk_model_config, desk_schedule

ENV_PREFIX = "SPINEDET_"


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "model": asdict(desk_model_config()),
        "schedule": asdict(desk_schedule()),
        "decode": asdict(DecodeConfig()),
        "data": {"manifest": None, "train_split": "train", "val_split": "val", "spacing": None},
        "seed": 0,
        "output_dir": "runs/default",
    }


def _parse_value(text: str):
    return yaml.safe_load(text) if text.strip() else None


def set_dotted(cfg: dict, key: str, value) -> None:
    """Assign ``a.b.c = value``; every segment must already exist."""
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        if i == len(parts) - 1:
            node[p] = value
        else:
            node = node[p]


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "loss_weights":
            merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v
    return base


def env_overrides(environ=None) -> dict:
    """``SPINEDET_SCHEDULE__LEARNING_RATE=1e-3`` -> ``{"schedule.learning_rate": 0.001}``."""
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            out[k[len(ENV_PREFIX):].lower().replace("__", ".")] = _parse_value(v)
    return out


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    k, v = text.split("=", 1)
    return k.strip(), _parse_value(v)


def load_config(path=None, overrides=(), environ=None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        merge(cfg, doc)
    for k, v in env_overrides(environ).items():
        set_dotted(cfg, k, v)
    for item in overrides:
        set_dotted(cfg, *parse_override(item))
    return cfg


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(_plain(copy.deepcopy(cfg)), sort_keys=True))
    return path


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        return x.item()
    return x
