"""Flat ``key = value`` run configuration.

Precedence, lowest to highest: built-in defaults, the config file, command-line
flags. The config file path comes from ``--config`` or, failing that, the
``TRAFFICLSTM_CONFIG`` environment variable.
"""
from __future__ import annotations

import os
from dataclasses import MISSING, dataclass, field, fields
from typing import Optional

from .errors import UsageError
from .train import TrainConfig

CONFIG_ENV = "TRAFFICLSTM_CONFIG"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(p) for p in text.strip("()[] ").replace(" ", "").split(",") if p)
    return text


def coerce_fields(cls, raw: dict) -> tuple[dict, list]:
    """Convert string values to the types of ``cls``'s defaults.

    Returns ``(values, errors)``; unknown keys and unparsable values each add
    one error, so callers can report all problems at once.
    """
    known = {f.name: f for f in fields(cls)}
    values, errors = {}, []
    for key, text in raw.items():
        if key not in known:
            errors.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(str(text), _default(known[key]))
        except ValueError as exc:
            errors.append(f"bad value for {key!r}: {exc}")
    return values, errors


@dataclass
class RunConfig:
    series: str = "series.csv"
    out: str = "run"
    window_len: int = 12
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    norm_scheme: str = "zscore"
    norm_scope: str = "train_only"
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def fractions(self):
        return (self.train_frac, self.val_frac, self.test_frac)


def parse_config_text(text: str) -> dict:
    entries = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n} is not key = value: {line!r}")
        k, v = line.split("=", 1)
        entries[k.strip()] = v.strip()
    return entries


def read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None


def resolve_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV) or None
    raw = read_config_file(path) if path else {}
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})

    run_keys = {f.name for f in fields(RunConfig)} - {"train"}
    train_keys = {f.name for f in fields(TrainConfig)}
    run_raw = {k: v for k, v in raw.items() if k in run_keys}
    train_raw = {k: v for k, v in raw.items() if k in train_keys}
    errors = [f"unknown key {k!r}" for k in raw if k not in run_keys | train_keys]
    run_vals, e1 = coerce_fields(RunConfig, run_raw)
    train_vals, e2 = coerce_fields(TrainConfig, train_raw)
    errors += e1 + e2
    if errors:
        raise UsageError("invalid configuration: " + "; ".join(errors))
    return RunConfig(**run_vals, train=TrainConfig(**train_vals))


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def describe_defaults() -> str:
    """Every config key with its default, in config-file syntax."""
    lines = [f"{f.name} = {_render(_default(f))}" for f in fields(RunConfig) if f.name != "train"]
    lines += [f"{f.name} = {_render(_default(f))}" for f in fields(TrainConfig)]
    return "\n".join(lines)
