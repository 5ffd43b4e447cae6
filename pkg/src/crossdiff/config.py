"""Flat key=value run configuration with section-prefixed keys.

Resolution order: schema defaults < config file < command-line overrides.
Unknown keys are rejected; every command persists its fully resolved
config next to its outputs.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

ENV_DATA_ROOT = "CROSSDIFF_DATA_ROOT"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (default, parser)
SCHEMA: dict[str, tuple] = {
    "preset": ("desk", str),
    "seed": (0, int),
    "out.dir": ("runs/latest", str),
    "data.root": (None, str),
    "data.tags": (None, str),           # comma-separated tag filter
    "train.alpha": (1.0, float),
    "train.beta": (1.0, float),
    "train.lr": (1e-4, float),
    "train.batch_size": (None, int),    # preset default when unset
    "train.total_steps": (1000, int),
    "train.weight_decay": (1e-4, float),
    "train.clip_norm": (1.0, float),
    "train.log_every": (1, int),
    "train.checkpoint_every": (1000, int),
    "model.T": (None, int),
    "model.beta_start": (None, float),
    "model.beta_end": (None, float),
    "model.time_embedding": (None, str),
    "model.dtype": (None, str),
    "model.decoder_depth_mult": (None, int),
    "model.encoder_variant": ("base", str),
    "predict.theta": (0.5, float),
    "predict.ensemble": (5, int),
    "staple.tol": (1e-6, float),
    "staple.max_iter": (100, int),
    "oracle.sigma": (0.1, float),
    "oracle.steps": (200, int),
    "oracle.neighborhood": (8, int),
    "oracle.theta": (0.5, float),
    "synth.n": (8, int),
    "synth.side": (64, int),
    "synth.n_cracks_min": (1, int),
    "synth.n_cracks_max": (3, int),
    "synth.width_min": (1.0, float),
    "synth.width_max": (3.0, float),
}

PRESET_BATCH = {"desk": 4, "full": 12}


def defaults() -> dict:
    cfg = {k: v for k, (v, _) in SCHEMA.items()}
    env_root = os.environ.get(ENV_DATA_ROOT)
    if env_root:
        cfg["data.root"] = env_root
    return cfg


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    _, parser = SCHEMA[key]
    parser = _bool if parser is bool else parser
    try:
        return parser(text.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{p}:{lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def resolve(config_path=None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if config_path is not None:
        cfg.update(load_config_file(config_path))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = parse_value(key, value) if isinstance(value, str) else value
    if cfg["train.batch_size"] is None:
        cfg["train.batch_size"] = PRESET_BATCH.get(cfg["preset"], 4)
    return cfg


def persist(cfg: dict, path) -> None:
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg) if cfg[k] is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def model_overrides(cfg: dict) -> dict:
    """Map resolved model.* keys onto ModelConfig override kwargs."""
    mapping = {
        "model.T": "T",
        "model.beta_start": "beta_start",
        "model.beta_end": "beta_end",
        "model.time_embedding": "time_embedding",
        "model.dtype": "dtype",
        "model.decoder_depth_mult": "decoder_depth_mult",
    }
    return {attr: cfg[k] for k, attr in mapping.items() if cfg.get(k) is not None}
