"""TOML run configuration.

Sections mirror the library dataclasses::

    preset = "desk"            # or "paper"
    [paths]   data_root, run_dir
    [train]   TrainConfig fields (except weights / data_root)
    [weights] LossWeights fields; lambda_li is an inline table
    [synth]   SynthParams fields plus n_per_domain

Every key has a default, unknown keys are an error, and command-line flags
override file values.
"""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import ConfigError
from .losses import GAN_MODES, LossWeights
from .synth import SynthParams
from .training import TrainConfig

PRESETS = ("desk", "paper")
OPTIONAL_NUMBERS = {"n_res", "sigma", "max_shift"}
RUN_DIR_ENV = "LMCG_RUN_DIR"


def default_run_dir() -> str:
    return os.environ.get(RUN_DIR_ENV) or "run"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    n_per_domain: int = 400
    run_dir: str = field(default_factory=default_run_dir)
    preset: str = "desk"

    @property
    def data_root(self) -> str:
        return self.train.data_root


def _coerce(section: str, key: str, value: Any, default: Any):
    where = f"[{section}] {key}"
    if key in OPTIONAL_NUMBERS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return int(value) if key in ("n_res", "max_shift") else float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
        unknown = sorted(set(value) - set(default))
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        return {k: _coerce(section, f"{key}.{k}", value.get(k, v), v) for k, v in default.items()}
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _merge(section: str, obj, table: dict, skip: tuple[str, ...] = ()):
    known = {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {unknown}")
    updates = {k: _coerce(section, k, v, known[k]) for k, v in table.items()}
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    allowed = {"preset", "paths", "train", "weights", "synth"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    preset = doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    train = TrainConfig.paper() if preset == "paper" else TrainConfig.desk()
    cfg = RunConfig(train=train, synth=SynthParams(size=train.size), preset=preset)

    for name in ("paths", "train", "weights", "synth"):
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    paths = dict(doc.get("paths", {}))
    unknown = sorted(set(paths) - {"data_root", "run_dir"})
    if unknown:
        raise ConfigError(f"[paths]: unknown keys {unknown}")
    for k in ("data_root", "run_dir"):
        if k in paths and not isinstance(paths[k], str):
            raise ConfigError(f"[paths] {k}: expected a string")
    if "data_root" in paths:
        cfg.train = replace(cfg.train, data_root=paths["data_root"])
    if "run_dir" in paths:
        cfg.run_dir = paths["run_dir"]

    cfg.train = _merge("train", cfg.train, doc.get("train", {}), skip=("weights", "data_root"))
    cfg.train = replace(cfg.train, weights=_merge("weights", cfg.train.weights, doc.get("weights", {})))
    synth = dict(doc.get("synth", {}))
    if "n_per_domain" in synth:
        cfg.n_per_domain = _coerce("synth", "n_per_domain", synth.pop("n_per_domain"), 0)
    if "size" not in synth:
        synth["size"] = cfg.train.size
    cfg.synth = _merge("synth", cfg.synth, synth)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    t = cfg.train
    if t.size % 32:
        raise ConfigError(f"train.size must be divisible by 32, got {t.size}")
    if t.gan_mode not in GAN_MODES:
        raise ConfigError(f"train.gan_mode must be one of {GAN_MODES}, got {t.gan_mode!r}")
    for k in ("iters_regressor", "iters_stage1", "iters_stage2"):
        if getattr(t, k) < 1:
            raise ConfigError(f"train.{k} must be >= 1")
    if not 0 < t.holdout < 1:
        raise ConfigError(f"train.holdout must be in (0, 1), got {t.holdout}")
    if t.lr < 0 or t.lr_regressor < 0:
        raise ConfigError("learning rates must be >= 0")
    if cfg.n_per_domain < 1:
        raise ConfigError("synth.n_per_domain must be >= 1")


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    train = asdict(cfg.train)
    weights = train.pop("weights")
    data_root = train.pop("data_root")
    train = {k: v for k, v in train.items() if v is not None}
    synth = asdict(cfg.synth)
    synth["head_axes"] = list(synth["head_axes"])
    synth["n_per_domain"] = cfg.n_per_domain
    return {"preset": cfg.preset, "paths": {"data_root": data_root, "run_dir": cfg.run_dir},
            "train": train, "weights": weights, "synth": synth}


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def echo_config(cfg: RunConfig, run_dir: str | os.PathLike) -> Path:
    """Write the fully resolved config into the run directory."""
    p = Path(run_dir) / "config.toml"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps(cfg))
    return p


def with_overrides(cfg: RunConfig, train: dict | None = None, weights: dict | None = None,
                   synth: dict | None = None, **top) -> RunConfig:
    """Apply already-typed overrides (from command-line flags)."""
    doc = config_to_dict(cfg)
    for section, upd in (("train", train), ("weights", weights), ("synth", synth)):
        for k, v in (upd or {}).items():
            if v is None:
                continue
            if k in ("data_root", "run_dir"):
                doc["paths"][k] = v
            else:
                doc[section][k] = v
    for k, v in top.items():
        if v is not None:
            if k in ("data_root", "run_dir"):
                doc["paths"][k] = v
            else:
                doc[k] = v
    return config_from_dict(doc)
