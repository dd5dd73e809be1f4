"""INI-style experiment configuration with strict key validation.

Sections and keys are checked against a fixed schema: any unknown section or
key fails fast with the offending name, so typos surface as configuration
errors (CLI exit code 2) instead of silently-ignored settings.  Values accept
plain numbers plus ``a/b`` fractions (handy for pixel budgets like 10/255);
lists are comma-separated.  All paths are resolved relative to the config
file's directory.
"""

from __future__ import annotations

import configparser
import os
from typing import Callable

__all__ = ["ConfigError", "ExperimentConfig"]


class ConfigError(ValueError):
    """Invalid configuration: unknown key/section or unparsable value."""


def _number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _int(text: str) -> int:
    value = _number(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _str(text: str) -> str:
    return text.strip()


def _floats(text: str) -> tuple:
    return tuple(_number(part) for part in text.split(",") if part.strip())


def _strs(text: str) -> tuple:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _weights(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        name, _, value = part.partition(":")
        if not value:
            raise ValueError(f"weights entries are name:value, got {part!r}")
        out[name.strip()] = _number(value)
    return out


def _pairs(text: str) -> dict:
    """name:path pairs; paths resolved later."""
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        name, _, value = part.partition(":")
        if not value:
            raise ValueError(f"entries are name:path, got {part!r}")
        out[name.strip()] = value.strip()
    return out


_PATH = object()  # marker: string value resolved against the config dir
_PATHS = object()  # marker: name:path map with resolved paths

_SCHEMA: dict = {
    "run": {
        "seed": _int,
        "out": _PATH,
        "threads": _int,
    },
    "corpus": {
        "count": _int,
        "hr_size": _int,
        "scale": _int,
        "weights": _weights,
    },
    "model": {
        "kind": _str,
        "channels": _int,
        "depth": _int,
        "scale": _int,
    },
    "train": {
        "regime": _str,
        "iterations": _int,
        "batch_size": _int,
        "lr": _number,
        "lambda": _number,
        "sigmas": _floats,
        "draws_per_sigma": _int,
        "include_clean": _bool,
        "log_interval": _int,
        "attack": _str,
        "init_from": _PATH,
    },
    "attack": {
        "checkpoints": _PATHS,
        "battery": _strs,
        "save_images": _bool,
    },
    "certify": {
        "checkpoint": _PATH,
        "sigmas": _floats,
        "epsilons": _floats,
        "n": _int,
        "p": _number,
        "trials": _int,
        "image_index": _int,
        "dump_images": _bool,
    },
    "eval": {
        "checkpoint": _PATH,
        "checkpoint_mrs": _PATH,
        "ablation": _bool,
        "noise_sigma": _number,
        "blur_ksize": _int,
        "blur_sigma": _number,
        "smooth_sigma": _number,
        "smooth_n": _int,
    },
    "sweep": {
        "command": _str,
        "parameter": _str,
        "values": _floats,
        "metric": _str,
        "row_dataset": _str,
        "row_method": _str,
    },
}

# Per-attack definition sections: [attack.<name>]
_ATTACK_KEYS: dict = {
    "kind": _str,
    "epsilon": _number,
    "alpha": _number,
    "iters": _int,
    "c": _number,
    "lr": _number,
}


class ExperimentConfig:
    """Parsed, schema-validated configuration."""

    def __init__(self, values: dict, base_dir: str, path: str):
        self.values = values
        self.base_dir = base_dir
        self.path = path

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str  # keep key case as written
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        base_dir = os.path.dirname(os.path.abspath(path))
        values: dict = {}
        for section in parser.sections():
            if section in _SCHEMA:
                keys = _SCHEMA[section]
            elif section.startswith("attack."):
                keys = _ATTACK_KEYS
            else:
                raise ConfigError(f"unknown config section [{section}]")
            values[section] = {}
            for key, raw in parser.items(section):
                if key not in keys:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                spec = keys[key]
                try:
                    if spec is _PATH:
                        value = os.path.normpath(os.path.join(base_dir, raw.strip()))
                    elif spec is _PATHS:
                        value = {name: os.path.normpath(os.path.join(base_dir, p))
                                 for name, p in _pairs(raw).items()}
                    else:
                        value = spec(raw)
                except (ValueError, ZeroDivisionError) as exc:
                    raise ConfigError(
                        f"bad value for {key!r} in [{section}]: {exc}") from exc
                values[section][key] = value
        return cls(values, base_dir, os.path.abspath(path))

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        value = self.get(section, key)
        if value is None:
            raise ConfigError(f"missing required key {key!r} in section [{section}]")
        return value

    def attack_section(self, name: str) -> dict:
        section = f"attack.{name}"
        if section not in self.values:
            raise ConfigError(f"attack definition [{section}] not found")
        return self.values[section]

    def attack_names(self) -> list:
        return [s.split(".", 1)[1] for s in self.values if s.startswith("attack.")]
