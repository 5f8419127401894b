"""Sectioned ``key = value`` experiment configuration.

Every key has a typed default; unknown sections or keys are errors. The
resolved configuration (defaults filled in, seed override applied) is what
gets written next to every run's outputs, and a run can be repeated from it
alone.
"""
from __future__ import annotations

import configparser
import math
import os
from typing import Any, Dict, Mapping, Optional, Tuple

from .models import BaseModelSpec, MetaModelSpec
from .pipeline import DatasetRecipe
from .training import TrainConfig

SEED_ENV = "F4FLOW_SEED"


class ConfigError(ValueError):
    pass


def _floats(sep: str):
    def parse(text: str) -> Tuple[float, ...]:
        return tuple(float(t) for t in text.split(sep))
    return parse


def _ints(sep: str):
    def parse(text: str) -> Tuple[int, ...]:
        return tuple(int(t) for t in text.split(sep))
    return parse


def _names(text: str) -> Tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], str):
            return ",".join(value)
        return ":".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (default, parser)
SCHEMA: Dict[str, Dict[str, Tuple[Any, Any]]] = {
    "run": {
        "seed": (0, int),
        "jobs": (1, int),
    },
    "phantom": {
        "families": (("tube-jet", "branch-slow", "cavity-vortex"), _names),
        "eval_families": (("dual-lumen",), _names),
        "n_models": (5, int),
        "n_frames": (3, int),
        "grid": (48, int),
        "dx": (1.5, float),
    },
    "synth": {
        "snr": ((10.0, 20.0), _floats(":")),
        "noise_order": ("before-crop", str),
    },
    "patch": {
        "stride": (6, int),
        "min_fluid": (0.05, float),
        "rotations": (0, int),
        "ratios": ((6, 2, 2), _ints(":")),
    },
    "model": {
        "channels": (16, int),
        "n_blocks_low": (4, int),
        "n_blocks_high": (4, int),
        "block_kind": ("residual", str),
        "activation": ("relu", str),
    },
    "train": {
        "lr0": (1e-4, float),
        "decay_factor": (math.sqrt(2.0), float),
        "decay_every_epochs": (10, int),
        "epochs": (60, int),
        "batch_size": (16, int),
        "l2_lambda": (5e-7, float),
        "loss_units": ("physical", str),
        "compartment": ("", str),
    },
    "ensemble": {
        "kind": ("none", str),
        "n_base": (3, int),
        "base_data": ("pooled", str),
        "block_kinds": ((), _names),
        "meta_channels": (32, int),
        "meta_epochs": (80, int),
        "include_lr": (False, _bool),
    },
    "eval": {
        "protocols": (("test",), _names),
        "stride": (8, int),
        "rim": (4, int),
        "slices": (False, _bool),
    },
}


class ExperimentConfig:
    """Typed, fully resolved view of a configuration file."""

    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self._v = {s: {k: d for k, (d, _) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in keys.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                self._v[section][key] = value
        self.validate()

    @classmethod
    def from_text(cls, text: str, env: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        values: Dict[str, Dict[str, Any]] = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            values[section] = {}
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    values[section][key] = SCHEMA[section][key][1](raw.strip())
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                values.setdefault("run", {})["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        return cls(values)

    @classmethod
    def load(cls, path, env: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, env)

    def validate(self) -> None:
        try:
            self.model_spec()
            self.train_config()
            self.recipe()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self["ensemble"]["kind"] not in ("none", "bagging", "stacking"):
            raise ConfigError("[ensemble] kind must be none, bagging or stacking")
        if self["ensemble"]["base_data"] not in ("pooled", "compartmentalized"):
            raise ConfigError("[ensemble] base_data must be pooled or compartmentalized")
        for p in self["eval"]["protocols"]:
            if p not in ("test", "recover-native"):
                raise ConfigError(f"[eval] unknown protocol {p!r}")
        if len(self["synth"]["snr"]) != 2:
            raise ConfigError("[synth] snr must be A:B")

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self._v[section]

    @property
    def seed(self) -> int:
        return int(self._v["run"]["seed"])

    def with_values(self, section: str, **values) -> "ExperimentConfig":
        merged = {s: dict(k) for s, k in self._v.items()}
        merged[section].update(values)
        return ExperimentConfig(merged)

    def to_text(self) -> str:
        out = []
        for section, keys in self._v.items():
            out.append(f"[{section}]")
            out.extend(f"{k} = {_fmt(v)}" for k, v in keys.items())
            out.append("")
        return "\n".join(out)

    def write(self, path) -> None:
        from .volume import _atomic_write
        _atomic_write(path, self.to_text().encode())

    # -- typed views -------------------------------------------------------------

    def model_spec(self, seed: Optional[int] = None, block_kind: Optional[str] = None) -> BaseModelSpec:
        m = self._v["model"]
        return BaseModelSpec(m["channels"], m["n_blocks_low"], m["n_blocks_high"],
                             block_kind or m["block_kind"], m["activation"],
                             self.seed if seed is None else seed)

    def meta_spec(self, n_base: int, seed: Optional[int] = None) -> MetaModelSpec:
        e = self._v["ensemble"]
        return MetaModelSpec(n_base=n_base, channels=e["meta_channels"], activation=self._v["model"]["activation"],
                             include_lr=e["include_lr"], seed=self.seed if seed is None else seed)

    def train_config(self, seed: Optional[int] = None, epochs: Optional[int] = None) -> TrainConfig:
        t = self._v["train"]
        return TrainConfig(lr0=t["lr0"], decay_factor=t["decay_factor"], decay_every_epochs=t["decay_every_epochs"],
                           epochs=t["epochs"] if epochs is None else epochs, batch_size=t["batch_size"],
                           l2_lambda=t["l2_lambda"], seed=self.seed if seed is None else seed,
                           loss_units=t["loss_units"])

    def recipe(self, families: Optional[Tuple[str, ...]] = None) -> DatasetRecipe:
        p, s, q = self._v["phantom"], self._v["synth"], self._v["patch"]
        return DatasetRecipe(tuple(families or p["families"]), p["n_models"], p["n_frames"], p["grid"], p["dx"],
                             tuple(s["snr"]), q["stride"], q["min_fluid"], q["rotations"], self.seed)
