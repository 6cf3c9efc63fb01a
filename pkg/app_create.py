import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import yaml
from dotenv import load_dotenv

import experiments
from client import ClientHyper
from convergence_monitor import MonitorConfig
from datagen import DatagenError, UniverseConfig
from encoders import EncoderConfig, EncoderError, PretrainConfig
from environment_validation import validate_environment_settings
from evaluation import EvaluationConfig
from losses import LossSettings
from server import RoundConfig, ServerError

DEFAULT_PERSONAFED_CONFIG_PATH = "config.yaml"
DEFAULT_PERSONAFED_LOGGING_LEVEL = "INFO"
DEFAULT_PERSONAFED_LOGGING_FORMAT = (
    "[%(asctime)s] [%(levelname)s] [%(filename)s:%(lineno)d:%(funcName)s] - %(message)s"
)
DEFAULT_PERSONAFED_GENERIC_ERROR = (
    "An unexpected error occurred. Re-run with PERSONAFED_LOGGING_LEVEL=DEBUG for details."
)

SECTIONS = {
    "universe": UniverseConfig,
    "encoder": EncoderConfig,
    "pretrain": PretrainConfig,
    "client": ClientHyper,
    "loss": LossSettings,
    "rounds": RoundConfig,
    "evaluation": EvaluationConfig,
    "monitor": MonitorConfig,
    "presets": experiments.PresetConfig,
}
TOP_LEVEL_KEYS = (
    "preset",
    "output_dir",
    "dataset",
    "pretrained_params",
    "parallelism",
    "init_from_pretrained",
    "emit_svg",
)
# config.yaml spelling -> dataclass field
RENAMED_KEYS = {"loss": {"lambda": "lam"}}
HIDDEN_KEYS = {"client": ("loss",), "rounds": ("seed", "registry")}
TUPLE_FIELDS = ("hidden_dims", "fpir_points", "seeds", "sweep_rates", "ablation_setups")


class ConfigError(Exception):
    """Raised when the experiment configuration is invalid; names the offending field."""

    def __init__(self, field_path, message):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class RuntimeSettings:
    output_root: Optional[Path]
    config_path: Path
    parallelism: Optional[int]
    logging_level: str
    logging_format: str
    generic_error: str


def create_settings() -> RuntimeSettings:
    load_dotenv()

    output_root = os.getenv("PERSONAFED_OUTPUT_ROOT")
    parallelism = os.getenv("PERSONAFED_PARALLELISM")
    settings = RuntimeSettings(
        output_root=Path(output_root) if output_root else None,
        config_path=Path(os.getenv("PERSONAFED_CONFIG_PATH", DEFAULT_PERSONAFED_CONFIG_PATH)),
        parallelism=parallelism,
        logging_level=os.getenv("PERSONAFED_LOGGING_LEVEL", DEFAULT_PERSONAFED_LOGGING_LEVEL).upper(),
        logging_format=os.getenv("PERSONAFED_LOGGING_FORMAT", DEFAULT_PERSONAFED_LOGGING_FORMAT),
        generic_error=os.getenv("PERSONAFED_GENERIC_ERROR", DEFAULT_PERSONAFED_GENERIC_ERROR),
    )
    validate_environment_settings(
        settings.output_root, settings.config_path, settings.parallelism, settings.logging_level
    )
    return replace(settings, parallelism=int(parallelism) if parallelism else None)


def configure_logging(settings: RuntimeSettings):
    logging.basicConfig(
        format=settings.logging_format,
        level=getattr(logging, settings.logging_level),
    )


def _build_section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    renamed = RENAMED_KEYS.get(name, {})
    allowed = {f.name for f in fields(cls)} - set(HIDDEN_KEYS.get(name, ()))
    values = {}
    for key, value in raw.items():
        target = renamed.get(key, key)
        if key in renamed.values() or target not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown key")
        values[target] = tuple(value) if target in TUPLE_FIELDS and value is not None else value
    try:
        return cls(**values)
    except (TypeError, ValueError, DatagenError, EncoderError, ServerError) as error:
        raise ConfigError(name, str(error)) from error


def _check_range(field_path, ok, message):
    if not ok:
        raise ConfigError(field_path, message)


def _validate(config: experiments.ExperimentConfig):
    try:
        _validate_fields(config)
    except TypeError as error:
        raise ConfigError("config", f"wrong value type: {error}") from error


def _validate_fields(config: experiments.ExperimentConfig):
    loss, client = config.client.loss, config.client
    _check_range("preset", config.preset in experiments.PRESETS, f"expected one of {experiments.PRESETS}")
    _check_range("loss.lambda", 0.0 <= loss.lam <= 1.0, "must lie in [0, 1]")
    if loss.k_as_ratio:
        _check_range("loss.k", 0.0 < loss.k <= 1.0, "a ratio must lie in (0, 1]")
    else:
        _check_range("loss.k", loss.k >= 1 and int(loss.k) == loss.k, "must be a positive integer")
    _check_range("loss.gamma", loss.gamma > 0, "must be positive")
    _check_range("loss.exponent_t", loss.exponent_t > 0, "must be positive")
    _check_range("client.learning_rate", client.learning_rate >= 0, "must be non-negative")
    _check_range("client.local_epochs", client.local_epochs >= 0, "must be non-negative")
    _check_range("client.batch_size", client.batch_size >= 2, "must be at least 2")
    _check_range(
        "evaluation.fpir_points",
        all(0 < f < 1 for f in config.evaluation.fpir_points),
        "every point must lie in (0, 1)",
    )
    _check_range(
        "evaluation.enroll_fraction", 0 < config.evaluation.enroll_fraction < 1, "must lie in (0, 1)"
    )
    _check_range("monitor.probes", config.monitor.probes >= 2, "must be at least 2")
    _check_range("monitor.radius", config.monitor.radius > 0, "must be positive")
    _check_range("presets.seeds", len(config.presets.seeds) > 0, "needs at least one seed")
    _check_range(
        "presets.sweep_rates",
        all(0 < r <= 1 for r in config.presets.sweep_rates),
        "every rate must lie in (0, 1]",
    )
    unknown = set(config.presets.ablation_setups) - set(experiments.ABLATION_SETUPS)
    _check_range("presets.ablation_setups", not unknown, f"unknown setups {sorted(unknown)}")
    _check_range(
        "encoder.input_dim",
        config.dataset is not None or config.encoder.input_dim == config.universe.input_dim,
        "must equal universe.input_dim",
    )
    _check_range(
        "parallelism", config.parallelism is None or config.parallelism >= 1, "must be at least 1"
    )


def config_from_mapping(raw) -> experiments.ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    unknown = set(raw) - set(TOP_LEVEL_KEYS) - set(SECTIONS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    sections = {name: _build_section(name, raw.get(name)) for name in SECTIONS}
    client = replace(sections.pop("client"), loss=sections.pop("loss"))
    top = {key: raw[key] for key in TOP_LEVEL_KEYS if key in raw and raw[key] is not None}
    config = experiments.ExperimentConfig(client=client, **sections, **top)
    _validate(config)
    return config


def create_config(
    path=None, settings: Optional[RuntimeSettings] = None, overrides: Optional[dict] = None
) -> experiments.ExperimentConfig:
    """
    Resolve the experiment configuration: YAML file (defaults when absent),
    then the PERSONAFED_* runtime settings, then explicit command-line overrides.
    """
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as error:
            raise ConfigError("config", f"cannot parse {path}: {error}") from error
    config = config_from_mapping(raw)
    if settings is not None:
        if settings.output_root is not None:
            config = replace(config, output_dir=str(settings.output_root))
        if settings.parallelism is not None:
            config = replace(config, parallelism=settings.parallelism)
    if overrides:
        config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
        _validate(config)
    return config
