"""Run configuration: built-in defaults, then a TOML file, then command-line overrides."""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path

import tomli

from .errors import ConfigError
from .guidance import GuidanceWeights, SamplerConfig
from .models import MMDiTConfig
from .synth import SynthConfig
from .training import TrainConfig

# desk-scale model defaults; n_real and level count follow the data section
MODEL_DEFAULTS = {
    "n_blocks": 2,
    "hidden": 32,
    "n_heads": 4,
    "id_dim": 32,
    "text_dim": 16,
    "time_freqs": 8,
    "mlp_ratio": 2,
    "score_param": "absorbing",
    "init_scale": 1.0,
}

DEFAULTS = {
    "seed": 0,
    "data": {"n_records": 512, "n_val": 64, **{f.name: f.default for f in dataclasses.fields(SynthConfig) if f.name != "seed"}},
    "model": dict(MODEL_DEFAULTS),
    "train": {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "seed"},
    "sampler": {"n_steps": 96, "n_samples": 64, "clamp": "clip", "final_fill": "argmax"},
    "guidance": {"w0": 1.9, "w1": 1.0, "w2": 1.0, "w3": 1.6},
    "grid_search": {"w0": [1.0, 1.25, 1.5, 1.75, 2.0], "w1": [1.0, 1.2, 1.4], "w2": [1.0], "w3": [1.6]},
    "oracle": {"n_real": 4, "levels": 2, "length": 3, "trials": 100, "noise": 0.3, "sampling_chains": 2000, "sampling_steps": 256},
}


def _merge(base: dict, over: dict, where=""):
    for key, value in over.items():
        name = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a section")
            _merge(base[key], value, name)
        else:
            base[key] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve a full configuration dict; unknown keys raise ``ConfigError`` naming the key."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        _merge(cfg, data)
    if overrides:
        _merge(cfg, overrides)
    return cfg


def _build(cls, section: dict, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    kw.update(extra)
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def synth_config(cfg: dict) -> SynthConfig:
    return _build(SynthConfig, cfg["data"], seed=cfg["seed"])


def model_config(cfg: dict) -> MMDiTConfig:
    data = synth_config(cfg)
    return _build(
        MMDiTConfig,
        cfg["model"],
        n_real=data.n_real,
        max_levels=data.levels,
        n_emotions=data.n_emotions,
        text_vocab=data.text_alphabet,
        id_dim=data.embed_dim,
    )


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"], seed=cfg["seed"])


def sampler_config(cfg: dict) -> SamplerConfig:
    return _build(SamplerConfig, cfg["sampler"], seed=cfg["seed"])


def guidance_weights(cfg: dict) -> GuidanceWeights:
    return _build(GuidanceWeights, cfg["guidance"])


def oracle_synth_config(cfg: dict) -> SynthConfig:
    """The generator config restricted to the enumerable oracle instance."""
    o = cfg["oracle"]
    data = dict(cfg["data"])
    data.update(n_real=o["n_real"], levels=o["levels"], length=o["length"])
    data["n_identities"] = min(data["n_identities"], o["n_real"])
    return _build(SynthConfig, data, seed=cfg["seed"])
