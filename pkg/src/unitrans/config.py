"""Run configuration: a JSON document with defaults for everything but the seed."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from . import workbench as wb
from .mie import Stage1Config
from .stage2 import Stage2Config


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "workbench": {"eval_scenes": 50},
    "mie": {"d": 4, "tau": 0.9, "lambda_is": 0.1, "steps": 600, "batch_scenes": 8, "lr": 1e-3},
    "stage2": {
        "lambda_feat": 5.0, "lambda_ctr": 0.01, "lambda_r": 0.001, "tau_alpha": 0.9,
        "top_k": 3, "steps": 600, "batch_scenes": 2, "crop": 16, "lr": 1e-3,
    },
    "bank": {"K": 8, "shared": 1, "blocks": 2, "window": 4, "heads": 4},
    "split": {
        "n_train": 8, "n_emerging": 2, "train_scenes": [0, 800], "test_scenes": [800, 1000],
        "modality_seed_base": 1,
    },
    "eval": {
        "profile_trials": 100, "ablation_steps": 300, "ablation_seeds": [0, 1, 2],
        "ablation_scenes": 20,
        "ablation_values": {
            "d": [2, 4, 8], "K": [1, 2, 4, 8], "shared": [0, 1, 2],
            "loss-term": ["feat", "ctr", "r"],
        },
    },
    "out_dir": "runs/default",
}

_INT_FIELDS = {"steps", "batch_scenes", "crop", "top_k", "K", "shared", "blocks", "window",
               "heads", "d", "n_train", "n_emerging", "modality_seed_base", "eval_scenes",
               "profile_trials", "ablation_steps", "ablation_scenes"}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict) and key != "ablation_values":
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            if key in _INT_FIELDS and not (isinstance(value, int) and not isinstance(value, bool)):
                raise ConfigError(f"'{where}' must be an integer")
            out[key] = value
    return out


@dataclass
class RunConfig:
    doc: dict

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.doc["out_dir"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.doc, sort_keys=True).encode()).hexdigest()

    def split(self) -> wb.ModalitySplit:
        s = self.doc["split"]
        return wb.make_split(s["n_train"], s["n_emerging"],
                             (tuple(s["train_scenes"]), tuple(s["test_scenes"])),
                             modality_seed_base=s["modality_seed_base"])

    def stage1(self) -> Stage1Config:
        m = self.doc["mie"]
        return Stage1Config(d=m["d"], tau=m["tau"], lambda_is=m["lambda_is"], lr=m["lr"],
                            steps=m["steps"], batch_scenes=m["batch_scenes"], seed=self.seed)

    def stage2(self) -> Stage2Config:
        s, b = self.doc["stage2"], self.doc["bank"]
        return Stage2Config(
            lambda_feat=s["lambda_feat"], lambda_ctr=s["lambda_ctr"], lambda_r=s["lambda_r"],
            tau_alpha=s["tau_alpha"], lr=s["lr"], top_k=s["top_k"], K=b["K"],
            n_shared=b["shared"], n_blocks=b["blocks"], window=b["window"], heads=b["heads"],
            batch_scenes=s["batch_scenes"], steps=s["steps"], crop=s["crop"], seed=self.seed,
        )


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "seed" not in doc:
        raise ConfigError("missing required field 'seed'")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("'seed' must be a non-negative integer")
    rest = {k: v for k, v in doc.items() if k != "seed"}
    merged = _merge(DEFAULTS, rest, "")
    merged["seed"] = seed
    cfg = RunConfig(merged)
    try:
        cfg.stage2().validate()
        cfg.split()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return from_dict(doc)
