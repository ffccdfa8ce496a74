"""
Run configuration: built-in defaults, then a JSON file, then ETHD_*
environment variables, then command-line flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from .contact_model import TapProfile
from .device_sim import DeviceParams
from .errors import ConfigError
from .psychophysics import PLATE_ORDER, PROTOCOL_REFERENCES, MaskingModel

logger = logging.getLogger(__name__)

ENV_PREFIX = "ETHD_"
FORMATS = ("csv", "json")
STAIRCASE_KEYS = {"start_k", "step", "reversals_to_stop", "forgiveness_window", "max_trials", "forgiveness"}


@dataclass(frozen=True)
class CalibrationConfig:
    weight: float = 0.981
    k_start: float = 100.0
    k_end: float = 4000.0
    step: float = 100.0
    repeats: int = 5
    sensor_noise: float = 0.0
    settle_time: float = 1.0
    window: float = 0.5
    saturation_threshold: float = 1900.0


@dataclass(frozen=True)
class Experiment1Config:
    plate_set: str = "table1"
    k_start: float = 200.0
    k_end: float = 2000.0
    k_step: float = 100.0
    n_taps: int = 30
    duration: float = 13.0
    sample_rate: float = 10000.0
    crop_start: float = 3.0
    crop_end: float = 10.0
    min_separation: float = 0.1
    dft_window: str = "boxcar"
    selection_levels: int = 5
    compensator: Optional[str] = None
    save_signals: bool = False

    def stiffness_grid(self) -> List[float]:
        n = int(round((self.k_end - self.k_start) / self.k_step))
        return [self.k_start + i * self.k_step for i in range(n + 1)]


@dataclass(frozen=True)
class Experiment2Config:
    plates: tuple = PLATE_ORDER
    references: tuple = PROTOCOL_REFERENCES
    runs_per_cell: int = 100
    trial_logs: bool = False


@dataclass(frozen=True)
class StatsConfig:
    n_perm: int = 10000
    interaction: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    format: str = "csv"
    max_workers: int = 4
    log_level: str = "INFO"
    device: DeviceParams = field(default_factory=DeviceParams)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    profile: TapProfile = field(default_factory=TapProfile)
    experiment1: Experiment1Config = field(default_factory=Experiment1Config)
    staircase: Dict[str, Any] = field(default_factory=dict)
    observer: MaskingModel = field(default_factory=MaskingModel)
    experiment2: Experiment2Config = field(default_factory=Experiment2Config)
    stats: StatsConfig = field(default_factory=StatsConfig)

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["device"] = self.device.to_dict()
        data["observer"]["weights"] = dict(self.observer.weights)
        data["experiment2"]["plates"] = list(self.experiment2.plates)
        data["experiment2"]["references"] = list(self.experiment2.references)
        return data


def _block(cls, mapping: Mapping[str, Any], name: str):
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known - {"_comment"}
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {sorted(unknown)}")
    values = {k: v for k, v in mapping.items() if k in known}
    for key in ("plates", "references"):
        if key in values:
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid '{name}' block: {e}") from e


def _staircase_block(mapping: Mapping[str, Any]) -> Dict[str, Any]:
    unknown = set(mapping) - STAIRCASE_KEYS - {"_comment"}
    if unknown:
        raise ConfigError(f"Unknown keys in 'staircase': {sorted(unknown)}")
    return {k: v for k, v in mapping.items() if k in STAIRCASE_KEYS}


def from_mapping(data: Mapping[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Layer a parsed JSON document over `base` (defaults if omitted)"""
    base = base or RunConfig()
    # a manifest carries the resolved config under "config"
    if "manifest_version" in data and "config" in data:
        data = data["config"]

    top = {"seed", "out_dir", "format", "max_workers", "log_level"}
    blocks = {"device", "calibration", "profile", "experiment1", "staircase", "observer", "experiment2", "stats"}
    unknown = set(data) - top - blocks - {"_comment"}
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")

    updates: Dict[str, Any] = {k: data[k] for k in top if k in data}
    if "device" in data:
        updates["device"] = DeviceParams.from_mapping(data["device"])
    if "profile" in data:
        updates["profile"] = TapProfile.from_mapping(data["profile"])
    if "observer" in data:
        updates["observer"] = MaskingModel.from_mapping(data["observer"])
    if "staircase" in data:
        updates["staircase"] = _staircase_block(data["staircase"])
    if "calibration" in data:
        updates["calibration"] = _block(CalibrationConfig, data["calibration"], "calibration")
    if "experiment1" in data:
        updates["experiment1"] = _block(Experiment1Config, data["experiment1"], "experiment1")
    if "experiment2" in data:
        updates["experiment2"] = _block(Experiment2Config, data["experiment2"], "experiment2")
    if "stats" in data:
        updates["stats"] = _block(StatsConfig, data["stats"], "stats")
    return replace(base, **updates)


def _env_overrides(env: Mapping[str, str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for key, cast in (("SEED", int), ("OUT_DIR", str), ("LOG_LEVEL", str), ("MAX_WORKERS", int)):
        raw = env.get(ENV_PREFIX + key)
        if raw is None or raw == "":
            continue
        try:
            overrides[key.lower()] = cast(raw)
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}{key}={raw!r} is not a valid {cast.__name__}")
    return overrides


def load_config(path: Union[str, Path, None] = None, env: Optional[Mapping[str, str]] = None,
                **overrides) -> RunConfig:
    """Resolve the run configuration.

    `overrides` are the explicit command-line values; None entries are
    ignored so unset flags fall through to the lower layers.
    """
    config = RunConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        config = from_mapping(data, config)
        logger.debug("Loaded config from %s", path)

    env_values = _env_overrides(os.environ if env is None else env)
    flag_values = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(config, **{**env_values, **flag_values})
    except TypeError as e:
        raise ConfigError(f"Invalid override: {e}") from e
