"""Run configuration: defaults, config file, command-line overrides.

Config files are flat ``section.key = value`` text ('#' starts a comment).
Precedence is defaults < file < flags; every key has a default, so any subset
may be omitted. Values are coerced to the default's type.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict = {
    "seed": 0,
    "out": "",                      # empty -> $MOSAICTRAIN_OUT or ./runs
    # data
    "data.root": "",                # empty -> synthetic dataset
    "data.resize_to": 64,
    "data.crop_to": 64,
    "data.synthetic_classes": 4,
    "data.synthetic_per_class": 8,
    "data.synthetic_size": 64,
    # model
    "model.stage_num": 3,
    "model.c": 128,
    "model.mlp_hidden": 0,          # 0 -> same as c
    "model.channels": (8, 16, 32, 64, 128),
    "model.input_size": 64,
    "model.use_gates": True,
    # training
    "train.epochs": 60,
    "train.batch_size": 8,
    "train.lr_pretrained": 1e-4,
    "train.lr_new": 1e-3,
    "train.weight_decay": 5e-4,
    "train.momentum": 0.9,
    "train.freeze_epochs": 0,
    "train.progressive": True,
    "train.use_mosaic": True,
    # corruption defaults mirror the robustness protocol
    "corrupt.jitter_coefficient": 1.0,
    "corrupt.noise_mean": 0.0,
    "corrupt.noise_amplitude": 5.0,
}

# full-scale preset documented for pretrained-backbone runs (not used by the
# desk-scale defaults): resize 512 / crop 448, 150 epochs, batch 32,
# freeze_epochs 5, stage_num 3.
FULL_SCALE_PRESET = {
    "data.resize_to": 512,
    "data.crop_to": 448,
    "train.epochs": 150,
    "train.batch_size": 32,
    "train.freeze_epochs": 5,
}


class ConfigError(ValueError):
    """Unknown key or uncoercible value."""


def coerce(key: str, raw) -> object:
    """Coerce a raw (usually string) value to the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key!r}")
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(default, bool):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def load_config_file(path: str | Path) -> dict:
    """Parse a config file into a {key: typed value} dict."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def resolve(config_file: str | Path | None = None,
            overrides: dict | None = None) -> dict:
    """Merge defaults < file < overrides into a fully typed config dict."""
    cfg = dict(DEFAULTS)
    if config_file is not None:
        cfg.update(load_config_file(config_file))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        cfg[key] = coerce(key, value)
    return cfg
