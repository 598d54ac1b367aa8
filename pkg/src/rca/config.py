"""Flat key = value config files for training runs and synthetic corpora.

Lines are `key = value` (spaces optional), `#` starts a comment. Unknown
keys are an error so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .data import SynthConfig
from .trainer import HyperParams


class ConfigError(ValueError):
    """Malformed config file or unknown/invalid keys."""


def read_kv(path) -> dict:
    entries = {}
    with open(path, "r", encoding="ascii") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path} line {no}: expected 'key = value', got {raw.rstrip()!r}")
            key = key.strip()
            if key in entries:
                raise ConfigError(f"{path} line {no}: duplicate key {key!r}")
            entries[key] = value.strip()
    return entries


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {value!r}")


def _parse_tuple(key: str, value: str, n=None):
    parts = [p for p in value.split(",") if p.strip()]
    try:
        out = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {value!r}") from None
    if n is not None and len(out) != n:
        raise ConfigError(f"{key}: expected {n} values, got {len(out)}")
    return out


@dataclass(frozen=True)
class TrainSettings:
    """Hyperparameters plus the model/split knobs a run needs."""

    hp: HyperParams = HyperParams()
    hidden_dims: tuple = (1024, 512)
    embed_dim: int = 128
    split_ratios: tuple = (0.7, 0.1, 0.2)
    detach_domain: bool = False


_HP_FLOAT = {"tau1", "tau2", "epsilon", "alpha", "learning_rate", "dropout"}
_HP_INT = {"batch_size", "epochs", "seed", "positives_per_cell"}


def settings_from_dict(entries: dict) -> TrainSettings:
    hp_kwargs = {}
    hidden_dims = (1024, 512)
    embed_dim = 128
    split_ratios = (0.7, 0.1, 0.2)
    detach_domain = False
    for key, value in entries.items():
        try:
            if key in _HP_FLOAT:
                hp_kwargs[key] = float(value)
            elif key in _HP_INT:
                hp_kwargs[key] = int(value)
            elif key == "lambda":
                hp_kwargs["lam"] = float(value)
            elif key in ("dscl", "cscl", "al"):
                hp_kwargs[f"use_{key}"] = _parse_bool(key, value)
            elif key == "noise_norm_scope":
                if value not in ("per_example", "per_batch"):
                    raise ConfigError(f"noise_norm_scope: expected per_example or per_batch, "
                                      f"got {value!r}")
                hp_kwargs[key] = value
            elif key == "hidden_dims":
                hidden_dims = tuple(int(v) for v in _parse_tuple(key, value))
            elif key == "embed_dim":
                embed_dim = int(value)
            elif key == "split_ratios":
                split_ratios = _parse_tuple(key, value, n=3)
            elif key == "detach_domain":
                detach_domain = _parse_bool(key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    try:
        hp = HyperParams(**hp_kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return TrainSettings(hp=hp, hidden_dims=hidden_dims, embed_dim=embed_dim,
                         split_ratios=split_ratios, detach_domain=detach_domain)


def load_train_settings(path) -> TrainSettings:
    return settings_from_dict(read_kv(path))


_SYNTH_INT = {"num_domains", "num_classes", "per_cell", "feature_dim", "seed"}


def synth_config_from_dict(entries: dict) -> SynthConfig:
    kwargs = {}
    valid = {f.name for f in fields(SynthConfig)}
    for key, value in entries.items():
        if key not in valid:
            raise ConfigError(f"unknown synth config key {key!r}")
        try:
            kwargs[key] = int(value) if key in _SYNTH_INT else float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    try:
        return SynthConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_synth_config(path) -> SynthConfig:
    return synth_config_from_dict(read_kv(path))
