"""Flat ``key=value`` run configuration with dotted keys and ``#`` comments."""

from __future__ import annotations

import hashlib
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _str_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "lowlevel.d_s": (int, 32),
    "lowlevel.d": (int, 64),
    "lowlevel.prompts": (int, 4),
    "lowlevel.layers": (int, 2),
    "lowlevel.heads": (int, 2),
    "lowlevel.ffn_width": (int, 64),
    "midlevel.k": (int, 4),
    "midlevel.rounds": (int, 1),
    "midlevel.heads": (int, 1),
    "optim.lr": (float, 0.00325),
    "optim.weight_decay": (float, 1e-5),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.999),
    "optim.eps": (float, 1e-8),
    "train.batch_size": (int, 8),
    "train.epochs": (int, 30),
    "train.warmup_fraction": (float, 0.1),
    "train.modalities": (_str_list, ()),
}

_POSITIVE = {"lowlevel.d_s", "lowlevel.d", "lowlevel.heads", "lowlevel.ffn_width", "midlevel.k",
             "midlevel.rounds", "midlevel.heads", "optim.lr", "train.batch_size", "train.epochs"}


class RunConfig(dict):
    """Every known key always present; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        super().__init__({k: default for k, (_, default) in SCHEMA.items()})
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key)
        parser = SCHEMA[key][0]
        try:
            parsed = parser(value) if isinstance(value, str) else value
            if parser is int:
                parsed = int(parsed)
            elif parser is float:
                parsed = float(parsed)
            elif parser is _str_list and not isinstance(parsed, tuple):
                parsed = tuple(parsed)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {value!r} for {key!r}", key) from None
        if key in _POSITIVE and parsed <= 0:
            raise ConfigError(f"{key} must be positive", key)
        if key == "train.warmup_fraction" and not 0 <= parsed < 1:
            raise ConfigError("train.warmup_fraction must be in [0, 1)", key)
        super().__setitem__(key, parsed)

    __setitem__ = set

    def text(self) -> str:
        lines = []
        for k in sorted(self):
            v = self[k]
            lines.append(f"{k}={','.join(v) if isinstance(v, tuple) else repr(v)}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for k, v in parse_pairs(Path(path).read_text(), str(path)).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg
