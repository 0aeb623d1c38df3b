"""Structured run configuration: an INI file with fixed sections and keys.

Unknown sections or keys are rejected by name so typos cannot silently
fall back to defaults.  Defaults follow the reference training recipe:
learning rate 0.01, batch size 128, embedding dimension 64, window length
50, 5 shift levels, early-stopping patience 10.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import EncoderConfig
from .model import HeadConfig, config_digest
from .synthetic import SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A config file that does not match the schema."""


_SCHEMA = {
    "data": {
        "path": str,
        "format": str,
        "min_count": int,
        "label_dropout": float,
        "label_dropout_seed": int,
    },
    "model": {
        "kind": str,
        "d": int,
        "o": int,
        "layers": int,
        "heads": int,
        "dropout": float,
        "shift_levels": int,
        "sic_dropout": float,
        "aug_dropout": float,
        "match_norm": str,
    },
    "train": {
        "learning_rate": float,
        "batch_size": int,
        "gamma_dec": float,
        "gamma_mat": float,
        "max_epochs": int,
        "patience": int,
        "seed": int,
        "fixed_shift_level": int,
        "grad_clip": float,
        "loss_reduction": str,
    },
    "eval": {
        "k_list": str,
    },
    "synth": {
        "n_users": int,
        "n_items": int,
        "n_categories": int,
        "categories_per_item": str,
        "sequence_length": str,
        "shift_profile": str,
        "seed": int,
        "history_window": int,
        "zipf_exponent": float,
        "preference_boost": float,
        "format": str,
    },
}

_DEFAULTS = {
    "data": {
        "path": "",
        "format": "tsv",
        "min_count": 5,
        "label_dropout": 0.0,
        "label_dropout_seed": 0,
    },
    "model": {
        "kind": "self_attention",
        "d": 64,
        "o": 50,
        "layers": 2,
        "heads": 2,
        "dropout": 0.1,
        "shift_levels": 5,
        "sic_dropout": 0.1,
        "aug_dropout": 0.1,
        "match_norm": "l2",
    },
    "train": {
        "learning_rate": 0.01,
        "batch_size": 128,
        "gamma_dec": 0.4,
        "gamma_mat": 0.5,
        "max_epochs": 200,
        "patience": 10,
        "seed": 42,
        "fixed_shift_level": None,
        "grad_clip": None,
        "loss_reduction": "mean",
    },
    "eval": {
        "k_list": "10,20",
    },
    "synth": {
        "n_users": 2000,
        "n_items": 500,
        "n_categories": 20,
        "categories_per_item": "1,4",
        "sequence_length": "8,16",
        "shift_profile": "0.4,0.2,0.2,0.1,0.1",
        "seed": 7,
        "history_window": 50,
        "zipf_exponent": 1.0,
        "preference_boost": 6.0,
        "format": "tsv",
    },
}


def _int_tuple(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _float_tuple(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def as_dict(self) -> dict:
        return {s: dict(kv) for s, kv in self.values.items()}

    def digest(self) -> str:
        return config_digest(self.as_dict())

    # -- typed views ---------------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        m = self.values["model"]
        return EncoderConfig(
            kind=m["kind"], d=m["d"], o=m["o"], layers=m["layers"],
            heads=m["heads"], dropout_rate=m["dropout"],
        )

    def head_config(self, no_pmi: bool = False) -> HeadConfig:
        m = self.values["model"]
        return HeadConfig(
            n_levels=m["shift_levels"],
            sic_dropout=m["sic_dropout"],
            aug_dropout=m["aug_dropout"],
            match_norm=m["match_norm"],
            mean_pool_scoring=no_pmi,
        )

    def train_config(self, seed: int | None = None,
                     no_pmsid: bool = False, no_pmsim: bool = False) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            learning_rate=t["learning_rate"],
            batch_size=t["batch_size"],
            gamma_dec=0.0 if no_pmsid else t["gamma_dec"],
            gamma_mat=0.0 if no_pmsim else t["gamma_mat"],
            max_epochs=t["max_epochs"],
            patience=t["patience"],
            seed=t["seed"] if seed is None else seed,
            fixed_shift_level=t["fixed_shift_level"],
            grad_clip=t["grad_clip"],
            loss_reduction=t["loss_reduction"],
        )

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        s = self.values["synth"]
        return SynthConfig(
            n_users=s["n_users"],
            n_items=s["n_items"],
            n_categories=s["n_categories"],
            categories_per_item=_int_tuple(s["categories_per_item"]),
            sequence_length=_int_tuple(s["sequence_length"]),
            shift_profile=_float_tuple(s["shift_profile"]),
            seed=s["seed"] if seed is None else seed,
            history_window=s["history_window"],
            zipf_exponent=s["zipf_exponent"],
            preference_boost=s["preference_boost"],
        )

    def k_list(self) -> tuple:
        return _int_tuple(self.values["eval"]["k_list"])


def load_config(path) -> RunConfig:
    """Parse and validate a run config, applying schema defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}")

    values = {section: dict(defaults) for section, defaults in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            if raw.strip() == "":
                values[section][key] = None
                continue
            caster = _SCHEMA[section][key]
            try:
                values[section][key] = caster(raw)
            except ValueError:
                raise ConfigError(
                    f"{path}: key {key!r} in [{section}] expects {caster.__name__}, got {raw!r}"
                )
    return RunConfig(values=values)


def default_config() -> RunConfig:
    return RunConfig(values={s: dict(kv) for s, kv in _DEFAULTS.items()})
