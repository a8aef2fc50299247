"""Run configuration: one strict JSON document per training run.

The resolved config is written beside every run's outputs so a run can be
reproduced from its directory alone. Unknown keys anywhere in the
document are rejected; command-line flags override file values.
"""

from __future__ import annotations

import json
from pathlib import Path

from .segnet import DeskNetConfig
from .synth import SynthParams
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or mismatched run configuration (exit code 2)."""


DEFAULTS = {
    "seed": 0,
    "threads": 0,  # 0 = library default
    "data": {
        "n_slides": 12,
        "n_x": 16,
        "n_y": 16,
        "S": 32,
        "params": {
            "n_regions": 12,
            "marker_rate": 0.2,
            "stroma_halfwidth": 3,
            "noise_amp": 0.10,
            "pixel_noise": 0.02,
            "blob_radius": [2, 4],
        },
    },
    "model": {
        "C": 4,
        "levels": 3,
        "channels": [16, 32, 64],
    },
    "maf": {
        "k": 2,
        "D": 64,
        "h": 2,
        "d": 16,
        "pos_kind": "rel2d",
        "lambda": 0.2,
    },
    "train": {
        "lr0": 0.01,
        "momentum": 0.9,
        "beta": 0.95,
        "batch_size": 16,
        "max_epochs": 40,
        "patience": 10,
        "cap_per_class": 32,
    },
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {here!r} must be an object")
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = val
    return out


def resolve(file_path=None, overrides: dict | None = None) -> dict:
    """defaults <- config file <- flag overrides, strictly validated."""
    cfg = DEFAULTS
    if file_path:
        try:
            doc = json.loads(Path(file_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {file_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {file_path}: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {file_path}: top level must be an object")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def net_config(cfg: dict) -> DeskNetConfig:
    try:
        return DeskNetConfig(
            S=cfg["data"]["S"],
            C=cfg["model"]["C"],
            levels=cfg["model"]["levels"],
            channels=tuple(cfg["model"]["channels"]),
            k=cfg["maf"]["k"],
            D=cfg["maf"]["D"],
            heads=cfg["maf"]["h"],
            d=cfg["maf"]["d"],
            pos_kind=cfg["maf"]["pos_kind"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            lr0=t["lr0"],
            momentum=t["momentum"],
            beta=t["beta"],
            batch_size=t["batch_size"],
            max_epochs=t["max_epochs"],
            patience=t["patience"],
            lam=cfg["maf"]["lambda"],
            cap_per_class=t["cap_per_class"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def synth_params(cfg: dict) -> SynthParams:
    try:
        p = dict(cfg["data"]["params"])
        p["blob_radius"] = tuple(p["blob_radius"])
        return SynthParams(**p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def adopt_dataset(cfg: dict, meta: dict) -> dict:
    """Fold the dataset's actual geometry into the resolved config."""
    out = dict(cfg)
    out["data"] = {
        "n_slides": len(meta["slides"]),
        "n_x": meta["n_x"],
        "n_y": meta["n_y"],
        "S": meta["S"],
        "params": meta["params"],
    }
    out["model"] = dict(cfg["model"], C=meta["C"])
    return out


def write_resolved(out_dir, cfg: dict):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "resolved_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


def check_resume(out_dir, cfg: dict):
    """Refuse to reuse an output directory resolved under different settings."""
    existing = Path(out_dir) / "resolved_config.json"
    if existing.exists():
        prev = json.loads(existing.read_text())
        if prev != json.loads(json.dumps(cfg)):
            raise ConfigError(
                f"{out_dir}: existing resolved_config.json differs; "
                "refusing to overwrite a run with different settings"
            )
