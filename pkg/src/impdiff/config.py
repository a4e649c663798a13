"""Strict JSON experiment configuration and seed substreams."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (MixtureSpec, SupervisionModel, default_spec, pair_transition,
                   partial_inclusion_matrix, symmetric_transition)
from .objectives import TrainConfig
from .schedules import Schedule


class ConfigError(ValueError):
    pass


CORRUPTION_MODES = {
    "none": set(),
    "noisy": {"transition", "eps"},
    "partial": {"mode", "q"},
    "semi": {"labeled_fraction"},
}
TOP_KEYS = {"seed", "output_dir", "spec", "schedule", "corruption", "train", "classifier",
            "data", "sample", "condense"}
BLOCK_DEFAULTS = {
    "classifier": {"delta": 6.4, "draws": 16},
    "data": {"n_train": 4000, "n_test": 2000},
    "sample": {"n": 1000, "steps": 32},
    "condense": {"ipc": [1, 10], "repeats": 10},
}


def default_dict() -> dict:
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "spec": default_spec().to_dict(),
        "schedule": {"kind": "EDM", "params": {}, "sigma_data": 0.5},
        "corruption": {"mode": "noisy", "params": {"transition": "symmetric", "eps": 0.4}},
        "train": TrainConfig().to_dict(),
        **copy.deepcopy(BLOCK_DEFAULTS),
    }


def substream_seed(master: int, name: str) -> int:
    """Stable 63-bit seed for a named stage, independent of every other stage."""
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def substream(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master, name))


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    spec: MixtureSpec
    schedule: Schedule
    corruption: dict
    train: TrainConfig
    classifier: dict = field(default_factory=lambda: dict(BLOCK_DEFAULTS["classifier"]))
    data: dict = field(default_factory=lambda: dict(BLOCK_DEFAULTS["data"]))
    sample: dict = field(default_factory=lambda: dict(BLOCK_DEFAULTS["sample"]))
    condense: dict = field(default_factory=lambda: dict(BLOCK_DEFAULTS["condense"]))

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def transition(self):
        if self.corruption["mode"] != "noisy":
            return None
        p = self.corruption["params"]
        c, eps = self.num_classes, float(p["eps"])
        if p["transition"] == "symmetric":
            return symmetric_transition(c, eps)
        if p["transition"] == "pair":
            return pair_transition(c, eps)
        return np.asarray(p["transition"], dtype=float)

    def supervision_model(self) -> SupervisionModel:
        mode, p = self.corruption["mode"], self.corruption["params"]
        inclusion = partial_inclusion_matrix(self.num_classes, p["mode"], p["q"]) if mode == "partial" else None
        return SupervisionModel(self.spec.prior, self.transition(), inclusion)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "output_dir": self.output_dir, "spec": self.spec.to_dict(),
            "schedule": self.schedule.to_dict(), "corruption": self.corruption,
            "train": self.train.to_dict(), "classifier": self.classifier, "data": self.data,
            "sample": self.sample, "condense": self.condense,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _merge_block(name: str, given) -> dict:
    base = dict(BLOCK_DEFAULTS[name])
    if given is None:
        return base
    if not isinstance(given, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = set(given) - set(base)
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    base.update(given)
    return base


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    full = default_dict()
    full.update({k: v for k, v in d.items() if v is not None})
    try:
        spec = MixtureSpec.from_dict(full["spec"])
        schedule = Schedule.from_dict(full["schedule"])
        train = TrainConfig.from_dict({**TrainConfig().to_dict(), **full["train"]})
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig(
        seed=int(full["seed"]), output_dir=str(full["output_dir"]), spec=spec, schedule=schedule,
        corruption=_check_corruption(full["corruption"]), train=train,
        classifier=_merge_block("classifier", d.get("classifier")),
        data=_merge_block("data", d.get("data")),
        sample=_merge_block("sample", d.get("sample")),
        condense=_merge_block("condense", d.get("condense")),
    )
    _check_consistency(cfg)
    return cfg


def _check_corruption(block) -> dict:
    if not isinstance(block, dict) or set(block) - {"mode", "params"}:
        raise ConfigError("corruption must be {mode, params}")
    mode = block.get("mode", "none")
    if mode not in CORRUPTION_MODES:
        raise ConfigError(f"unknown corruption mode {mode!r}")
    params = dict(block.get("params") or {})
    if set(params) != CORRUPTION_MODES[mode]:
        raise ConfigError(f"corruption {mode!r} needs params {sorted(CORRUPTION_MODES[mode])}")
    return {"mode": mode, "params": params}


def _check_consistency(cfg: ExperimentConfig) -> None:
    c = cfg.num_classes
    mode, p = cfg.corruption["mode"], cfg.corruption["params"]
    try:
        if mode == "noisy":
            if not isinstance(p["transition"], str) and np.shape(p["transition"]) != (c, c):
                raise ConfigError(f"transition must be {c}x{c}")
            if p["transition"] not in ("symmetric", "pair") and isinstance(p["transition"], str):
                raise ConfigError("transition must be 'symmetric', 'pair' or a matrix")
            if not 0 <= float(p["eps"]) <= 1:
                raise ConfigError("eps must lie in [0, 1]")
        elif mode == "partial":
            partial_inclusion_matrix(c, p["mode"], p["q"])
        elif mode == "semi":
            if not 0 < float(p["labeled_fraction"]) <= 1:
                raise ConfigError("labeled_fraction must lie in (0, 1]")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.schedule.kind != "EDM":
        raise ConfigError("training and sampling run on the EDM schedule")
    if cfg.classifier["draws"] < 1 or cfg.classifier["delta"] < 0:
        raise ConfigError("classifier needs draws >= 1 and delta >= 0")
    if cfg.data["n_train"] < 1 or cfg.data["n_test"] < 1:
        raise ConfigError("data sizes must be positive")
    if cfg.sample["steps"] < 2 or cfg.sample["n"] < 0:
        raise ConfigError("sample needs steps >= 2 and n >= 0")
    ipc = cfg.condense["ipc"]
    ipc = ipc if isinstance(ipc, list) else [ipc]
    if not ipc or any(int(k) < 1 for k in ipc) or cfg.condense["repeats"] < 1:
        raise ConfigError("condense needs ipc >= 1 and repeats >= 1")


def apply_override(d: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = d
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {} if part not in node else node[part]
            if not isinstance(node[part], dict):
                raise ConfigError(f"cannot set {key}: {part} is not an object")
        node = node[part]
    node[parts[-1]] = value
    return d


def load(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    d = default_dict()
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(given) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d.update(given)
    for a in overrides:
        apply_override(d, a)
    if seed is not None:
        d["seed"] = seed
    if out is not None:
        d["output_dir"] = out
    return from_dict(d)
