"""Run configuration: defaults < TOML file < ``CLMRKIT_*`` environment < CLI flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import DEFAULT_PARAMETERS, DEFAULT_PROBABILITIES, TRANSFORM_ORDER, TransformChain
from .contrastive import TrainConfig
from .errors import InvalidValue, ParseError, UnknownKey
from .evaluation import ProbeConfig
from .model import EncoderConfig

ENV_PREFIX = "CLMRKIT_"
# CLI flag name -> config key; CLMRKIT_<FLAG> is read from the environment as well
FLAG_KEYS = {
    "seed": "seed",
    "deterministic": "deterministic",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "temperature": "train.temperature",
    "asymmetric": "train.asymmetric_augmentation",
    "workers": "train.workers",
    "checkpoint_interval": "train.checkpoint_interval",
    "dataset": "data.manifest",
    "sample_rate": "data.sample_rate",
    "n_tags": "data.n_tags",
    "preset": "encoder.preset",
    "head": "probe.head",
    "probe_seeds": "probe.seeds",
    "max_epochs": "probe.max_epochs",
}
ENCODER_PRESETS = {"canonical": EncoderConfig.canonical, "desk": EncoderConfig.desk}


@dataclass
class AugmentConfig:
    probabilities: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PROBABILITIES))
    parameters: dict[str, dict[str, Any]] = field(default_factory=dict)

    def chain(self, crop_length: int) -> TransformChain:
        return TransformChain.default(crop_length, self.probabilities, self.parameters)


@dataclass
class EncoderSection:
    preset: str = "canonical"
    input_length: int | None = None
    channels: list[int] | None = None
    projection_dim: int = 128

    def build(self) -> EncoderConfig:
        if self.preset not in ENCODER_PRESETS:
            raise InvalidValue(f"encoder.preset {self.preset!r} not in {sorted(ENCODER_PRESETS)}")
        base = ENCODER_PRESETS[self.preset]()
        return EncoderConfig(input_length=self.input_length or base.input_length,
                             channels=self.channels or base.channels,
                             projection_dim=self.projection_dim)


@dataclass
class DataConfig:
    manifest: str | None = None
    sample_rate: int = 22050
    n_tags: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_SECTIONS = {"train": TrainConfig, "probe": ProbeConfig, "augment": AugmentConfig,
             "encoder": EncoderSection, "data": DataConfig}


def _coerce(value, current, key: str):
    """Convert ``value`` (possibly an env string) to the type of ``current``."""
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise InvalidValue(f"{key}: {value!r} is not a boolean")
        return bool(value)
    try:
        if isinstance(current, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, (tuple, list)) and isinstance(value, str):
            return type(current)(json.loads(value))
    except (TypeError, ValueError) as exc:
        raise InvalidValue(f"{key}: cannot use {value!r}") from exc
    return value


def _merge(flat: dict[str, Any], updates: Mapping[str, Any], source: str):
    for key, value in updates.items():
        if value is None:
            continue
        if key not in flat and not key.startswith(("augment.probabilities.", "augment.parameters.")):
            raise UnknownKey(f"unknown configuration key {key!r} (from {source})")
        flat[key] = value


def _flatten(table: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping) and name not in ("augment.parameters",) \
                and not name.startswith("augment.parameters."):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _defaults_flat() -> dict[str, Any]:
    flat = _flatten({k: v for k, v in asdict(RunConfig()).items() if k != "augment"})
    del flat["train.seed"]   # the top-level seed drives every stage
    flat["train.workers"] = os.cpu_count() or 1
    for kind in TRANSFORM_ORDER:
        flat[f"augment.probabilities.{kind}"] = DEFAULT_PROBABILITIES[kind]
    return flat


def _validate_augment_key(key: str):
    parts = key.split(".")
    if parts[1] == "probabilities":
        if len(parts) != 3 or parts[2] not in TRANSFORM_ORDER:
            raise UnknownKey(f"unknown augmentation {key!r}")
    else:
        if len(parts) < 3 or parts[2] not in TRANSFORM_ORDER:
            raise UnknownKey(f"unknown augmentation {key!r}")


def load_config(path=None, env: Mapping[str, str] | None = None,
                flags: Mapping[str, Any] | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig`.

    ``flags`` and environment entries use dotted keys such as
    ``train.epochs``.  The environment variable for ``train.epochs`` is
    ``CLMRKIT_TRAIN_EPOCHS``; flag-style names such as ``CLMRKIT_EPOCHS``
    (see :data:`FLAG_KEYS`) are accepted too and win over the long form.
    """
    flat = _defaults_flat()
    defaults = dict(flat)
    if path is not None:
        try:
            table = tomllib.loads(Path(path).read_text())
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        parameters = table.get("augment", {}).pop("parameters", {}) if isinstance(
            table.get("augment"), dict) else {}
        file_flat = _flatten(table)
        for kind, params in parameters.items():
            file_flat[f"augment.parameters.{kind}"] = params
        _merge(flat, file_flat, str(path))
    if env:
        env_updates = {}
        for key in list(flat):
            var = ENV_PREFIX + key.replace(".", "_").upper()
            if var in env:
                env_updates[key] = env[var]
        for flag, key in FLAG_KEYS.items():
            var = ENV_PREFIX + flag.upper()
            if var in env:
                env_updates[key] = env[var]
        _merge(flat, env_updates, "environment")
    if flags:
        _merge(flat, flags, "command line")
    return _build(flat, defaults)


def _build(flat: dict[str, Any], defaults: dict[str, Any]) -> RunConfig:
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    top = {}
    probabilities, parameters = {}, {}
    for key, value in flat.items():
        if key.startswith("augment."):
            _validate_augment_key(key)
            parts = key.split(".")
            if parts[1] == "probabilities":
                probabilities[parts[2]] = _coerce(value, 0.0, key)
            else:
                if not isinstance(value, Mapping):
                    raise InvalidValue(f"{key} must be a table")
                unknown = set(value) - set(DEFAULT_PARAMETERS[parts[2]])
                if unknown:
                    raise UnknownKey(f"{key}: unknown parameters {sorted(unknown)}")
                parameters[parts[2]] = dict(value)
            continue
        current = defaults.get(key)
        value = _coerce(value, current, key) if current is not None else value
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    try:
        for kind, p in probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"augment.probabilities.{kind}={p} outside [0, 1]")
        cfg = RunConfig(
            seed=top.get("seed", 0),
            deterministic=top.get("deterministic", False),
            train=TrainConfig(**sections["train"], seed=top.get("seed", 0)),
            probe=ProbeConfig(**sections["probe"]),
            augment=AugmentConfig(probabilities, parameters),
            encoder=EncoderSection(**sections["encoder"]),
            data=DataConfig(**sections["data"]),
        )
        if cfg.deterministic:
            cfg.train.workers = 1
        if cfg.train.workers < 1:
            raise ValueError("train.workers must be >= 1")
        if cfg.data.n_tags < 1:
            raise ValueError("data.n_tags must be >= 1")
        cfg.encoder.build()
        cfg.augment.chain(cfg.encoder.build().input_length)
    except InvalidValue:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidValue(str(exc)) from exc
    return cfg
