"""
Run Configuration
Built-in defaults, an optional flat YAML file and command-line overrides merged into one RunConfig.

Precedence: defaults < YAML file (--config) < command-line flags.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from model import ENCODER_KINDS, ModelConfig, ModelConfigError, canonical_encoders
from trainer import TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "RSA_RANK_LOG_LEVEL"
MSLR_DIR_ENV = "RSA_RANK_MSLR_DIR"

# CLI spelling -> model variant
VARIANT_NAMES: Dict[str, str] = {"listnet": "listnet", "sa": "listnet_sa", "rsa": "listnet_rsa"}

NORMALIZATIONS: Tuple[str, ...] = ("none", "query-minmax")

# Default encoder set per variant when none is given
DEFAULT_ENCODERS: Dict[str, str] = {"listnet": "", "sa": "+", "rsa": "".join(ENCODER_KINDS)}

REQUIRED_PATHS: Dict[str, Tuple[str, ...]] = {
    "train": ("train", "valid"),
    "eval": ("model", "test"),
    "predict": ("model", "test"),
    "attention": ("model", "test"),
    "synth": ("out",),
}

# Keys that describe the invocation rather than the run; never read from a config file
_INVOCATION_KEYS = ("subcommand", "config")


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or missing required paths."""


@dataclass(frozen=True)
class RunConfig:
    subcommand: str = ""
    config: Optional[str] = None

    # paths
    train: Optional[str] = None
    valid: Optional[str] = None
    test: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None

    # model
    variant: str = "rsa"
    encoders: Optional[str] = None
    hidden: int = 64
    attention_weight: float = 1.0
    seed: int = 0

    # training
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    workers: int = 1
    progress: bool = False

    # data
    normalize: str = "none"
    k_max: int = 4

    # synthetic data
    train_queries: int = 200
    valid_queries: int = 50
    test_queries: int = 50
    docs_per_query: int = 20
    num_features: int = 10

    @property
    def model_variant(self) -> str:
        return VARIANT_NAMES[self.variant]

    @property
    def encoder_kinds(self) -> Tuple[str, ...]:
        kinds = DEFAULT_ENCODERS[self.variant] if self.encoders is None else self.encoders
        return canonical_encoders(kinds)

    @property
    def k_max_floor(self) -> Optional[int]:
        return self.k_max if self.k_max > 0 else None

    def validate(self) -> None:
        if self.variant not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANT_NAMES)}")
        if self.normalize not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalize!r}; expected one of {NORMALIZATIONS}")
        if self.k_max < 0:
            raise ConfigError(f"k_max must be >= 0, got {self.k_max}")
        for name in ("train_queries", "valid_queries", "test_queries", "docs_per_query", "num_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        try:
            kinds = self.encoder_kinds
            if self.variant != "listnet" and not kinds:
                raise ConfigError(f"variant {self.variant} needs at least one encoder")
            self.to_train_config().validate()
        except (ModelConfigError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def validate_for(self, subcommand: str) -> None:
        """Validate values plus the paths the subcommand needs."""
        self.validate()
        missing = [name for name in REQUIRED_PATHS.get(subcommand, ()) if not getattr(self, name)]
        if missing:
            flags = ", ".join(f"--{name}" for name in missing)
            raise ConfigError(f"{subcommand} requires {flags}")

    def to_model_config(self, d: int) -> ModelConfig:
        try:
            return ModelConfig(
                d=d,
                d_h=self.hidden,
                encoders=self.encoder_kinds,
                seed=self.seed,
                variant=self.model_variant,
                attention_weight=self.attention_weight,
            )
        except ModelConfigError as e:
            raise ConfigError(str(e)) from e

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            workers=self.workers,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Settings only; the subcommand and config path are left out."""
        data = asdict(self)
        for key in _INVOCATION_KEYS:
            data.pop(key)
        return data


_FIELD_DEFAULTS: Dict[str, Any] = {f.name: f.default for f in fields(RunConfig)}
_OPTIONAL_STR = {"config", "train", "valid", "test", "model", "out", "encoders"}


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        if key in _OPTIONAL_STR:
            return None
        raise ConfigError(f"{key} must not be empty")
    if key == "encoders" and isinstance(value, (list, tuple)):
        return "".join(str(v) for v in value)
    if key in _OPTIONAL_STR:
        return str(value)
    default = _FIELD_DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            raise ValueError(f"expected true/false, got {value!r}")
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def _check_keys(data: Mapping[str, Any], source: str) -> None:
    unknown = sorted(k for k in data if k not in _FIELD_DEFAULTS or k in _INVOCATION_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration key(s) in {source}: {', '.join(unknown)}")


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a flat YAML mapping of RunConfig keys.

    Returns:
        the coerced key/value pairs (an empty file gives {})
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a flat mapping, got {type(data).__name__}")
    _check_keys(data, str(path))
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config file {path} must be flat; nested keys: {nested}")
    logger.debug(f"Loaded {len(data)} setting(s) from {path}")
    return {k: _coerce(k, v) for k, v in data.items()}


def build_config(subcommand: str, overrides: Optional[Mapping[str, Any]] = None,
                 config_path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Merge defaults, the config file and explicit overrides.

    Args:
        subcommand: name of the CLI subcommand
        overrides: command-line values; None entries mean "not given"
        config_path: optional YAML file

    Returns:
        validated RunConfig
    """
    merged: Dict[str, Any] = {}
    if config_path:
        merged.update(load_config_file(config_path))
    given = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(given, "command-line overrides")
    merged.update({k: _coerce(k, v) for k, v in given.items()})
    config = replace(RunConfig(), subcommand=subcommand,
                     config=str(config_path) if config_path else None, **merged)
    config.validate()
    return config


def dump_config(config: RunConfig) -> str:
    """YAML with sorted keys, readable back through --config."""
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def env_log_level(default: str = "INFO") -> str:
    return os.getenv(LOG_LEVEL_ENV, default).upper()


def mslr_dir() -> Optional[Path]:
    value = os.getenv(MSLR_DIR_ENV)
    return Path(value) if value else None
