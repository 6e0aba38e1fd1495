"""Run configuration: one JSON document with sections
{data, model, corridor, train, eval}. Unknown keys are rejected and all
defaults are explicit after validation, so the resolved echo fully
describes a run.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .corridor import CorridorConfig
from .harness import TrainSettings
from .synthdata import FAMILIES, DatasetConfig, GenParams


class ConfigError(ValueError):
    """Configuration file is malformed, mistyped, or incomplete."""


_SCHEMA = {
    "data": {
        "path": (str, type(None)),
        "families": list,
        "chunks": int,
        "chunk_len": int,
        "t_full": int,
        "dt": float,
        "v_max": float,
        "workspace": float,
        "noise_std": float,
        "stride": int,
        "seed": (int, type(None)),
    },
    "model": {
        "hidden_width": int,
        "hidden_layers": int,
        "embed_dim": int,
        "encoder_hidden": int,
        "head_hidden": int,
    },
    "corridor": {
        "alpha": float,
        "lambda_anchor": float,
        "lambda_corridor": float,
        "penalty": str,
        "huber_beta": float,
        "enable_buffer": bool,
        "enable_consistency": bool,
        "extra_a": bool,
        "target_mode": str,
        "anchor_method": str,
        "anchor_target": str,
        "k": int,
    },
    "train": {
        "batch_size": int,
        "steps": int,
        "lr": float,
        "beta1": float,
        "beta2": float,
        "eps_opt": float,
        "eval_every": int,
        "val_fraction": float,
        "seed": (int, type(None)),
        "sampler_steps": int,
        "objective": str,
        "eval_max_records": (int, type(None)),
    },
    "eval": {
        "sampler_steps": int,
        "seed": (int, type(None)),
        "max_records": (int, type(None)),
    },
}

_DEFAULTS = {
    "data": {
        "path": None,
        "families": ["min_jerk_pick_place"],
        "chunks": 4000,
        "chunk_len": 16,
        "t_full": 40,
        "dt": 0.05,
        "v_max": 0.5,
        "workspace": 0.3,
        "noise_std": 0.002,
        "stride": 1,
        "seed": None,
    },
    "model": {
        "hidden_width": 128,
        "hidden_layers": 3,
        "embed_dim": 32,
        "encoder_hidden": 64,
        "head_hidden": 64,
    },
    "corridor": {
        "alpha": 2.0,
        "lambda_anchor": 1.0,
        "lambda_corridor": 0.5,
        "penalty": "l1",
        "huber_beta": 0.1,
        "enable_buffer": True,
        "enable_consistency": True,
        "extra_a": True,
        "target_mode": "delta",
        "anchor_method": "rdp_dp",
        "anchor_target": "inter_anchor",
        "k": 3,
    },
    "train": {
        "batch_size": 32,
        "steps": 2000,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_opt": 1e-8,
        "eval_every": 200,
        "val_fraction": 0.1,
        "seed": None,
        "sampler_steps": 10,
        "objective": "total",
        "eval_max_records": None,
    },
    "eval": {
        "sampler_steps": 10,
        "seed": None,
        "max_records": None,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with all defaults filled in."""

    sections: dict

    def __getitem__(self, key: str) -> dict:
        return self.sections[key]

    def to_json(self) -> str:
        return json.dumps(self.sections, indent=2) + "\n"

    def dataset_config(self) -> DatasetConfig:
        d = self.sections["data"]
        c = self.sections["corridor"]
        return DatasetConfig(
            families=tuple(d["families"]),
            chunks=d["chunks"],
            chunk_len=d["chunk_len"],
            k=c["k"],
            anchor_method=c["anchor_method"],
            anchor_target=c["anchor_target"],
            noise_std=d["noise_std"],
            stride=d["stride"],
            gen=GenParams(t_full=d["t_full"], dt=d["dt"], v_max=d["v_max"],
                          workspace=d["workspace"]),
        )

    def corridor_config(self) -> CorridorConfig:
        return CorridorConfig(**self.sections["corridor"])

    def train_settings(self, seed_override: int | None = None) -> TrainSettings:
        t = self.sections["train"]
        m = self.sections["model"]
        seed = seed_override if seed_override is not None else t["seed"]
        if seed is None:
            raise ConfigError("missing required field: train.seed")
        return TrainSettings(
            seed=seed,
            corridor=self.corridor_config(),
            chunk_len=self.sections["data"]["chunk_len"],
            batch_size=t["batch_size"],
            steps=t["steps"],
            lr=t["lr"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            eps_opt=t["eps_opt"],
            eval_every=t["eval_every"],
            val_fraction=t["val_fraction"],
            sampler_steps=t["sampler_steps"],
            hidden_width=m["hidden_width"],
            hidden_layers=m["hidden_layers"],
            embed_dim=m["embed_dim"],
            encoder_hidden=m["encoder_hidden"],
            head_hidden=m["head_hidden"],
            objective=t["objective"],
            eval_max_records=t["eval_max_records"],
        )


def _check_type(section: str, key: str, value, expected) -> object:
    kinds = expected if isinstance(expected, tuple) else (expected,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if bool not in kinds and isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected {kinds}, got bool")
    if not isinstance(value, tuple(kinds)):
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{section}.{key}: expected {names}, got {type(value).__name__}")
    return value


def validate_config(doc: dict) -> RunConfig:
    """Schema-validate a raw JSON document and fill every default."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for section in doc:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section: {section!r}")
        if not isinstance(doc[section], dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key in doc[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
    resolved = {}
    for section, defaults in _DEFAULTS.items():
        given = doc.get(section, {})
        out = {}
        for key, default in defaults.items():
            value = given.get(key, default)
            expected = _SCHEMA[section][key]
            kinds = expected if isinstance(expected, tuple) else (expected,)
            if value is None:
                if type(None) not in kinds:
                    raise ConfigError(f"{section}.{key}: must not be null")
            else:
                value = _check_type(section, key, value, expected)
            out[key] = value
        resolved[section] = out
    for fam in resolved["data"]["families"]:
        if fam not in FAMILIES:
            raise ConfigError(f"data.families: unknown family {fam!r}")
    try:
        CorridorConfig(**resolved["corridor"]).validate()
    except ValueError as exc:
        raise ConfigError(f"corridor: {exc}") from exc
    return RunConfig(resolved)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(doc)
