"""Run configuration: presets for the three tasks, JSON config files, and
flag overrides, merged into one validated, echoable structure."""

from __future__ import annotations

import copy
import dataclasses
import json
import os

from condflow.errors import ConfigError
from condflow.training import TrainConfig

DATA_ROOT_ENV = "CONDFLOW_DATA"

TASKS = ("mnist", "synth", "toyshapes")

# Model sections are task-specific; train sections share TrainConfig fields.
PRESETS: dict[str, dict] = {
    "mnist": {
        "task": "mnist",
        "model": {
            "n_blocks": 24, "hidden": 256, "alpha": 1.9, "seed": 0,
        },
        "train": {
            "sigma_noise": 0.02, "lr": 1e-3, "batch_size": 128,
            "max_steps": 2000, "tau": 1e-5, "seed": 0,
        },
        "data": {
            "n_train": 10000, "n_test": 2000, "allow_synthetic": True,
        },
    },
    "synth": {
        "task": "synth",
        "model": {
            "dim": 2, "n_conditions": 4, "n_blocks": 10, "hidden": 48,
            "alpha": 1.9, "seed": 0,
        },
        "train": {
            "sigma_noise": 0.0, "noise": False, "lr": 1e-3, "batch_size": 128,
            "max_steps": 5000, "tau": 1e-6, "seed": 0,
        },
        "data": {
            "density": "ring",
        },
    },
    "toyshapes": {
        "task": "toyshapes",
        "model": {
            "size": 32, "blocks_per_stage": [2, 2, 2], "hidden_ch": 12,
            "cond_ch": 8, "encoder_ch": 16, "alpha": 1.9, "seed": 0,
        },
        "train": {
            "sigma_noise": 0.05, "lr": 1e-3, "batch_size": 16,
            "max_steps": 1500, "tau": 1e-6, "seed": 0, "freeze_h_steps": 0,
        },
        "data": {
            "n_pool": 600, "pool_seed": 99,
        },
    },
}

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_TOP_KEYS = {"task", "model", "train", "data", "paths", "version"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _validate(cfg: dict) -> dict:
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    task = cfg.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    train = cfg.get("train", {})
    bad = set(train) - _TRAIN_FIELDS
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    model_keys = set(PRESETS[task]["model"]) | {"clamp", "permute", "use_haar"}
    bad = set(cfg.get("model", {})) - model_keys
    if bad:
        raise ConfigError(f"unknown model keys for task {task}: {sorted(bad)}")
    bad = set(cfg.get("data", {})) - set(PRESETS[task].get("data", {}))
    if bad:
        raise ConfigError(f"unknown data keys for task {task}: {sorted(bad)}")
    try:
        TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc
    return cfg


@dataclasses.dataclass
class RunConfig:
    task: str
    model: dict
    train: TrainConfig
    data: dict
    paths: dict

    def effective(self) -> dict:
        from condflow import __version__

        return {"task": self.task, "model": self.model,
                "train": dataclasses.asdict(self.train), "data": self.data,
                "paths": self.paths, "version": __version__}

    def echo(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "config.json")
        with open(path, "w") as f:
            json.dump(self.effective(), f, indent=2, sort_keys=True)
        return path


def load_run_config(preset: str | None = None, config_path: str | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Layered config: preset, then file, then explicit overrides."""
    if preset is None and config_path is None:
        raise ConfigError("either a preset or a config file is required")
    cfg: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {TASKS}")
        cfg = copy.deepcopy(PRESETS[preset])
    if config_path is not None:
        try:
            with open(config_path) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not cfg:
            task = file_cfg.get("task")
            if task in PRESETS:
                cfg = copy.deepcopy(PRESETS[task])
        cfg = _merge(cfg, file_cfg)
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg.setdefault("paths", {})
    _validate(cfg)
    # ablation switches echoed into the model section so graph construction
    # and the runtime loss agree on them
    train = TrainConfig(**cfg.get("train", {}))
    model = dict(cfg["model"])
    model.setdefault("clamp", train.clamp)
    model.setdefault("permute", train.permute)
    if cfg["task"] == "toyshapes":
        model.setdefault("use_haar", train.haar)
    return RunConfig(task=cfg["task"], model=model, train=train,
                     data=dict(cfg.get("data", {})), paths=dict(cfg["paths"]))


def data_root(paths: dict) -> str:
    root = paths.get("data") or os.environ.get(DATA_ROOT_ENV) or "data"
    return root
