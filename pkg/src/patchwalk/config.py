"""Flat key = value run configuration with presets.

One option per line, `#` starts a comment, values are typed by a fixed
schema.  Unknown or duplicate keys are errors so typos cannot silently fall
back to defaults.  The canonical echo (sorted lines) both documents a run and
feeds the run-directory hash.
"""

from __future__ import annotations

import hashlib

from .enhancer import ENHANCER_FACTOR, EnhancerConfig
from .policy import PolicyConfig
from .training import TrainConfig

__all__ = [
    "ConfigError", "PRESETS", "SCHEMA", "parse_config", "load_config",
    "canonical_config", "config_hash", "policy_config_from",
    "enhancer_config_from", "train_config_from",
]


class ConfigError(ValueError):
    pass


SCHEMA = {
    # geometry
    "target_h": int, "target_w": int, "factor": int, "z_base": int,
    "grid_stride": int, "input_extent": int,
    # optimization
    "t_steps": int, "epochs": int, "batch": int, "seed": int,
    "checkpoint_every": int, "lr": float, "weight_decay": float,
    "beta1": float, "lam": float, "reward_scale": float,
    "baseline": str, "baseline_decay": float,
    # run plumbing
    "dtype": str, "reference": str, "image_dir": str, "val_fraction": float,
}

_DESK = {
    "target_h": 64, "target_w": 64, "factor": 4, "z_base": 32,
    "grid_stride": 8, "input_extent": 32,
    "t_steps": 6, "epochs": 20, "batch": 16, "seed": 0,
    "checkpoint_every": 0, "lr": 3e-3, "weight_decay": 1e-7,
    "beta1": 0.5, "lam": 1.0, "reward_scale": 1.0,
    "baseline": "ema", "baseline_decay": 0.9,
    "dtype": "float64", "reference": "bicubic", "image_dir": "",
    "val_fraction": 8.0 / 48.0,
}

_PAPER = dict(_DESK)
_PAPER.update({
    "target_h": 120, "target_w": 160, "z_base": 60, "input_extent": 128,
    "t_steps": 18, "lr": 3e-4,
})

PRESETS = {"desk": _DESK, "paper": _PAPER}


def parse_config(text: str) -> dict:
    """Parse key = value lines into a typed dict (no preset merging)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        typ = SCHEMA[key]
        try:
            out[key] = typ(value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: key {key!r} expects {typ.__name__}, "
                f"got {value!r}") from None
    return out


def load_config(path=None, preset: str = "desk", overrides=None) -> dict:
    """Preset defaults, overlaid by the config file, then by CLI overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = dict(PRESETS[preset])
    if path is not None:
        with open(path) as fh:
            cfg.update(parse_config(fh.read()))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = SCHEMA[key](value)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["factor"] not in (4, 8, 16):
        raise ConfigError(f"factor must be 4, 8 or 16, got {cfg['factor']}")
    for key in ("target_h", "target_w"):
        if cfg[key] % cfg["factor"]:
            raise ConfigError(
                f"{key}={cfg[key]} not divisible by factor {cfg['factor']}")
        if cfg[key] % ENHANCER_FACTOR:
            raise ConfigError(
                f"{key}={cfg[key]} not divisible by the enhancer factor "
                f"{ENHANCER_FACTOR}")
    if not 0.0 <= cfg["val_fraction"] < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")


def canonical_config(cfg: dict) -> str:
    """Sorted one-per-line echo; the normalized form of a run configuration."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        text = repr(float(value)) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_config(cfg).encode()).hexdigest()[:12]


def policy_config_from(cfg: dict) -> PolicyConfig:
    return PolicyConfig(
        image_h=cfg["target_h"], image_w=cfg["target_w"], z_base=cfg["z_base"],
        grid_stride=cfg["grid_stride"], input_extent=cfg["input_extent"])


def enhancer_config_from(cfg: dict, state_dim: int) -> EnhancerConfig:
    return EnhancerConfig(base_h=cfg["target_h"] // ENHANCER_FACTOR,
                          base_w=cfg["target_w"] // ENHANCER_FACTOR,
                          state_dim=state_dim)


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        t_steps=cfg["t_steps"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        beta1=cfg["beta1"], batch=cfg["batch"], lam=cfg["lam"],
        reward_scale=cfg["reward_scale"], baseline=cfg["baseline"],
        baseline_decay=cfg["baseline_decay"], seed=cfg["seed"],
        dtype=cfg["dtype"], epochs=cfg["epochs"],
        checkpoint_every=cfg["checkpoint_every"], reference=cfg["reference"])
