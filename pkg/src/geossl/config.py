"""Sectioned TOML configuration shared by all CLI commands.

Sections map onto the dataclasses: ``[dataset]`` -> SynthConfig (+ ``path``),
``[loss]`` -> LossConfig, ``[train]`` and ``[eval]`` -> RunConfig,
``[ablation]`` -> axis/grid/seeds. Unknown sections or keys are errors.
"""
from __future__ import annotations

import ast
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .harness import RunConfig
from .losses import LossConfig
from .synthdata import SynthConfig

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

TRAIN_KEYS = ("batch_size", "epochs", "lr", "momentum", "weight_decay", "grad_clip", "queue_size",
              "temporal_views", "flatten_timestamps", "subset_size", "crop_size", "augmentation",
              "extra_aug", "hidden", "dim", "proj_dim", "ema_total_steps", "seed")
EVAL_KEYS = ("knn_k", "knn_sharpening", "probe_epochs", "eval_linear", "eval_spearman")
EVAL_EXTRA = {"protocol": "all", "checkpoint": ""}
ABLATION_DEFAULTS = {"axis": "cardinality", "grid": [], "seeds": [0, 1, 2, 3, 4]}
DEFAULT_GRIDS = {
    "augmentation": ["baseline", "brightness@1", "contrast@1", "sharpness@1", "gaussian_blur@1",
                     "gaussian_noise@1", "solarize@1", "posterize@1", "grayscale@1", "rrc@2",
                     "cutout@1", "grid_shuffle@1", "shear@1", "translate@1"],
    "cardinality": [0.125, 0.25, 0.5, 1.0],
    "temporal": ["on", "off"],
    "patch_size": [8, 12, 16],
    "alpha_dmax": [[1.0, 2500.0], [0.48, 2500.0], [0.48, 10000.0], [0.48, 18000.0]],
}


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    dataset: dict[str, Any] = field(default_factory=dict)
    loss: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=dict)
    ablation: dict[str, Any] = field(default_factory=dict)

    def synth_config(self) -> SynthConfig:
        d = {k: v for k, v in self.dataset.items() if k != "path"}
        return SynthConfig(**d)

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.loss)

    def run_config(self) -> RunConfig:
        ev = {k: v for k, v in self.eval.items() if k in EVAL_KEYS}
        return RunConfig(dataset=self.dataset["path"], loss=self.loss_config(), **self.train, **ev)

    def to_dict(self) -> dict:
        return asdict(self)


def defaults() -> dict[str, dict[str, Any]]:
    """Every addressable key with its default value, per section."""
    rc = RunConfig()
    ds = {"path": "data/synth", **asdict(SynthConfig())}
    return {
        "dataset": ds,
        "loss": asdict(LossConfig()),
        "train": {k: getattr(rc, k) for k in TRAIN_KEYS},
        "eval": {**{k: getattr(rc, k) for k in EVAL_KEYS}, **EVAL_EXTRA},
        "ablation": dict(ABLATION_DEFAULTS),
    }


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    return str(value) if value is not None else value


def merge(doc: dict, overrides: dict[str, Any] | None = None) -> AppConfig:
    """Validate ``doc`` (parsed TOML) and ``section.key`` overrides into an AppConfig."""
    base = defaults()
    merged = {s: dict(v) for s, v in base.items()}
    for section, table in doc.items():
        if section not in base:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in base[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            merged[section][key] = _coerce(value, base[section][key], f"{section}.{key}")
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in base or key not in base[section]:
            raise ConfigError(f"unknown config key {dotted}")
        merged[section][key] = _coerce(value, base[section][key], dotted)
    cfg = AppConfig(**merged)
    # construct every dataclass once so invalid values fail before any work starts
    try:
        cfg.synth_config()
        cfg.run_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.ablation["axis"] not in DEFAULT_GRIDS:
        raise ConfigError(f"ablation.axis must be one of {sorted(DEFAULT_GRIDS)}")
    if cfg.eval["protocol"] not in ("knn", "linear", "spearman", "all"):
        raise ConfigError("eval.protocol must be knn, linear, spearman or all")
    return cfg


def load(path: str | Path | None, overrides: dict[str, Any] | None = None) -> AppConfig:
    doc: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return merge(doc, overrides)


def help_text() -> str:
    lines = ["config keys (section.key = default):"]
    for section, table in defaults().items():
        for key, value in table.items():
            lines.append(f"  {section}.{key} = {json.dumps(value)}")
    return "\n".join(lines)


def dataclass_keys(cls) -> list[str]:
    return [f.name for f in fields(cls)]
