"""Configuration management for the CSI localizer."""

import hashlib
import json
import logging
import os
import re
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigurationError

THREADS_ENV = "CSILOC_THREADS"

PROFILE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "nic": {"dims": (30, 30, 3), "cnn_epochs": 100},
    "phone": {"dims": (10, 47, 1), "cnn_epochs": 300},
}


class LoggingConfig(BaseModel):
    """Logging configuration."""
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: Optional[str] = None
    max_file_size: str = "10MB"
    backup_count: int = Field(5, ge=0)

    @field_validator('level')
    @classmethod
    def validate_level(cls, v):
        if v.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"Unknown log level '{v}'")
        return v.upper()

    @field_validator('max_file_size')
    @classmethod
    def validate_size(cls, v):
        parse_size(v)
        return v


class RunConfig(BaseModel):
    """Flat run configuration; every model and sampling number is a named key."""
    model_config = ConfigDict(extra='forbid')

    profile: str = "nic"
    seed: int = Field(0, ge=0)
    workdir: str = "runs/default"
    force: bool = False

    # site and sampling
    area_w: float = Field(21.0, gt=0)
    area_h: float = Field(16.0, gt=0)
    ap_x: float = 10.5
    ap_y: float = 13.0
    grid: float = Field(0.5, gt=0)
    w1: int = Field(120, ge=1)
    w2: int = Field(1, ge=1)
    mode: str = "quiet,steady,busy"
    test_points: int = Field(195, ge=1)
    speed_min: float = Field(0.6, gt=0)
    speed_max: float = Field(4.0, gt=0)
    update_interval: float = Field(1.0, gt=0)
    snapshot_interval: float = Field(1800.0, gt=0)
    scatterers: int = Field(12, ge=0)

    # preprocessing
    window: int = Field(3, ge=1)

    # CNN
    cnn_kernel: int = Field(5, ge=1)
    cnn_filters: int = Field(10, ge=1)
    cnn_conv_layers: int = Field(3, ge=1)
    fc1: Optional[int] = Field(None, ge=1)
    fc2: Optional[int] = Field(None, ge=1)
    cnn_epochs: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.001, gt=0)
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    reduced_scale: bool = False

    # trajectories and LSTM
    memory_length: int = Field(5, ge=1)
    sigma: float = Field(2.0, gt=0)
    delta_t: float = Field(1.0, gt=0)
    train_trajectories: int = Field(30000, ge=1)
    validation_trajectories: int = Field(15000, ge=0)
    hidden_size: Optional[int] = Field(None, ge=1)
    dropout: float = Field(0.2, ge=0, lt=1)
    lstm_epochs: int = Field(100, ge=1)
    lstm_learning_rate: float = Field(0.001, gt=0)
    warmup: str = "repeat_oldest"

    # evaluation
    grid_size: float = Field(0.5, gt=0)
    correlation_threshold: Optional[float] = Field(0.8, gt=0, lt=1)
    ambiguity_sample: Optional[int] = Field(200, ge=1)
    self_trajectories: int = Field(20, ge=1)
    ambiguity_normalize: bool = True

    logging: LoggingConfig = LoggingConfig()

    @field_validator('profile')
    @classmethod
    def validate_profile(cls, v):
        if v not in PROFILE_DEFAULTS:
            raise ValueError(f"Profile must be one of {sorted(PROFILE_DEFAULTS)}, got '{v}'")
        return v

    @field_validator('cnn_kernel')
    @classmethod
    def validate_kernel(cls, v):
        if v % 2 == 0:
            raise ValueError(f"Conv kernel must be odd, got {v}")
        return v

    @field_validator('window')
    @classmethod
    def validate_window(cls, v):
        if v % 2 == 0:
            raise ValueError(f"Median filter window must be odd, got {v}")
        return v

    @field_validator('warmup')
    @classmethod
    def validate_warmup(cls, v):
        if v not in ('repeat_oldest', 'cnn_only'):
            raise ValueError(f"Warm-up must be 'repeat_oldest' or 'cnn_only', got '{v}'")
        return v

    @model_validator(mode='after')
    def fill_profile_defaults(self):
        h, w, _ = self.dims
        if self.fc1 is None:
            self.fc1 = h * w * self.cnn_filters
        if self.fc2 is None:
            self.fc2 = max(1, self.fc1 // 10)
        if self.cnn_epochs is None:
            self.cnn_epochs = PROFILE_DEFAULTS[self.profile]["cnn_epochs"]
        if self.hidden_size is None:
            self.hidden_size = self.fc2
        if not self.reduced_scale:
            if self.fc1 != h * w * self.cnn_filters:
                raise ValueError(
                    f"fc1 ({self.fc1}) must equal the flattened conv output {h * w * self.cnn_filters}; "
                    f"set reduced_scale: true for a narrower network"
                )
            if self.hidden_size != self.fc2:
                raise ValueError(
                    f"hidden_size ({self.hidden_size}) must equal fc2 ({self.fc2}); "
                    f"set reduced_scale: true for a narrower tracker"
                )
        if self.speed_min > self.speed_max:
            raise ValueError(f"speed_min {self.speed_min} exceeds speed_max {self.speed_max}")
        if self.w2 > self.w1:
            raise ValueError(f"w2 ({self.w2}) must not exceed w1 ({self.w1})")
        if self.window > h:
            raise ValueError(f"Median filter window {self.window} exceeds the {h} scans of a {self.profile} image")
        return self

    @property
    def dims(self) -> Tuple[int, int, int]:
        return PROFILE_DEFAULTS[self.profile]["dims"]

    def canonical(self) -> Dict[str, Any]:
        """Settings that determine outputs (force and logging excluded)."""
        return self.model_dump(exclude={'force', 'logging'})

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def expand_env_vars(data: Any) -> Any:
    """Recursively expand environment variables in configuration data."""
    if isinstance(data, dict):
        return {key: expand_env_vars(value) for key, value in data.items()}
    elif isinstance(data, list):
        return [expand_env_vars(item) for item in data]
    elif isinstance(data, str):
        return os.path.expandvars(data)
    return data


def parse_override(item: str) -> Tuple[str, Any]:
    """'key=value' with the value typed as YAML ('0.5' -> float, 'null' -> None)."""
    if '=' not in item:
        raise ConfigurationError(f"Override '{item}' must look like key=value")
    key, raw = item.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override '{item}' has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Override '{item}' has an unparseable value: {e}")
    return key, value


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    merged = dict(raw)
    for item in overrides:
        key, value = parse_override(item)
        if key.startswith('logging.'):
            merged['logging'] = dict(merged.get('logging') or {})
            merged['logging'][key.split('.', 1)[1]] = value
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[str] = None, overrides: Iterable[str] = (),
                **flags: Any) -> RunConfig:
    """Load a flat YAML run configuration, then apply ``--set`` overrides and CLI flags."""
    # Load .env file if it exists (looks for .env in current working directory)
    env_file = Path('.env')
    if env_file.exists():
        load_dotenv(env_file)

    raw_config: Dict[str, Any] = {}
    if config_path is not None:
        config_file = Path(config_path)
        if not config_file.exists():
            raise FileNotFoundError(f"Configuration file not found: {config_path}")
        with open(config_file, 'r', encoding='utf-8') as f:
            raw_config = yaml.safe_load(f) or {}
        if not isinstance(raw_config, dict):
            raise ConfigurationError(f"{config_path}: expected a flat key: value mapping")

    expanded_config = expand_env_vars(raw_config)
    expanded_config = apply_overrides(expanded_config, overrides)
    expanded_config.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**expanded_config)


def parse_size(text: str) -> int:
    """'10MB' -> bytes; KB, MB and GB units."""
    match = re.fullmatch(r'\s*(\d+(?:\.\d+)?)\s*(B|KB|MB|GB)?\s*', str(text).upper())
    if not match:
        raise ValueError(f"Cannot parse size '{text}' (use e.g. 512KB, 10MB, 1GB)")
    number, unit = float(match.group(1)), match.group(2) or 'B'
    return int(number * {'B': 1, 'KB': 1024, 'MB': 1024 ** 2, 'GB': 1024 ** 3}[unit])


def thread_count(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return value


def setup_logging(config: LoggingConfig, stage: str = "cli") -> logging.Logger:
    """Configure the stage logger and the ``src`` package logger."""
    logger = logging.getLogger(f"csi-localizer.{stage}")

    # Map string levels to logging constants
    level_map = {
        'DEBUG': logging.DEBUG,
        'INFO': logging.INFO,
        'WARNING': logging.WARNING,
        'ERROR': logging.ERROR,
        'CRITICAL': logging.CRITICAL
    }
    log_level = level_map.get(config.level.upper(), logging.INFO)

    formatter = logging.Formatter(config.format)
    handlers = [logging.StreamHandler()]
    if config.file:
        Path(config.file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(RotatingFileHandler(
            config.file, maxBytes=parse_size(config.max_file_size), backupCount=config.backup_count,
            encoding='utf-8',
        ))

    for target in (logging.getLogger("csi-localizer"), logging.getLogger("src")):
        target.setLevel(log_level)
        # Remove existing handlers
        for handler in target.handlers[:]:
            target.removeHandler(handler)
            handler.close()
    for handler in handlers:
        handler.setFormatter(formatter)
    logging.getLogger("csi-localizer").handlers.extend(handlers)
    logging.getLogger("src").handlers.extend(handlers)
    logger.setLevel(log_level)
    return logger


def create_example_config(output_path: str, profile: str = "nic") -> Path:
    """Write a commented flat configuration with every key at its profile default."""
    config = RunConfig(profile=profile)
    data = config.model_dump(exclude={'force'})
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(f"# CSI localizer run configuration ({profile} profile defaults)\n")
        f.write("# Any key can be overridden on the command line with --set key=value\n")
        yaml.safe_dump(data, f, default_flow_style=False, sort_keys=False)
    return path


def config_summary(config: RunConfig) -> Dict[str, Any]:
    h, w, c = config.dims
    return {
        'profile': config.profile,
        'image': f"{h}x{w}x{c}",
        'cnn': f"{config.cnn_conv_layers} x conv{config.cnn_kernel}x{config.cnn_kernel}/{config.cnn_filters} "
               f"-> fc {config.fc1} -> fc {config.fc2} -> 2",
        'lstm': f"T={config.memory_length}, hidden {config.hidden_size}, dropout {config.dropout}",
        'grid': config.grid,
        'modes': config.mode,
        'seed': config.seed,
        'config_hash': config.config_hash()[:12],
    }
