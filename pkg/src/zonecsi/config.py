"""Experiment configuration: TOML sections with typed defaults.

Every key has a default. Unknown sections or keys are rejected by their
dotted name so typos never pass silently.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import tomli

from .errors import ConfigError

# Train share of the reference split: 24,000 training samples out of 105,996.
REFERENCE_TRAIN_FRACTION = 24000 / 105996


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "zonecsi"


@dataclass(frozen=True)
class SceneSection:
    cell_origin: tuple = (40.0, -40.0)
    cell_size: tuple = (160.0, 80.0)
    ue_height: float = 1.5
    grid_shape: tuple = (100, 100)
    bs_position: tuple = (-150.0, 0.0, 25.0)
    n_horizontal: int = 16
    n_vertical: int = 4
    element_spacing: float = 0.5
    num_generator_zones: int = 8
    scatterers_per_zone: int = 6
    scatterer_height: tuple = (0.0, 15.0)
    carrier_frequency: float = 3.5e9
    bandwidth: float = 16e6
    num_subcarriers: int = 64
    pathloss_exponent: float = 3.0
    max_paths: int = 15
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    dataset: str = ""  # ZCD1 file to use instead of a generated scene


@dataclass(frozen=True)
class TransformSection:
    n_c: int = 32
    normalizer: str = "rms"


@dataclass(frozen=True)
class ModelSection:
    l: int = 64
    beta: int = 16
    activation: str = "tanh"


@dataclass(frozen=True)
class ZonesSection:
    b: tuple = (1, 8)  # one trained method per entry
    seed: int = 0
    max_iters: int = 100


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch: int = 256
    epochs: int = 50
    seed: int = 0
    split_train_count: int = 0  # 0: the reference train fraction of the dataset
    schedule: str = "constant"
    final_lr_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    recalibrate_bn: bool = True
    dtype: str = "float64"


@dataclass(frozen=True)
class MobilitySection:
    speed_kmh: float = 10.0
    horizon_s: float = 3600.0
    dt_s: float = 1.0
    seed: int = 0
    policy: str = "download-all-once"
    cache_capacity: int = 1
    repeats: int = 1
    include_classifier: bool = False  # count the 2B centroid values in the MPTR payload


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    scene: SceneSection = field(default_factory=SceneSection)
    data: DataSection = field(default_factory=DataSection)
    transform: TransformSection = field(default_factory=TransformSection)
    model: ModelSection = field(default_factory=ModelSection)
    zones: ZonesSection = field(default_factory=ZonesSection)
    train: TrainSection = field(default_factory=TrainSection)
    mobility: MobilitySection = field(default_factory=MobilitySection)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the fully resolved config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same config with every seed set to ``seed``."""
        return replace(
            self,
            scene=replace(self.scene, seed=seed),
            zones=replace(self.zones, seed=seed),
            train=replace(self.train, seed=seed),
            mobility=replace(self.mobility, seed=seed),
        )


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        if key == "zones.b" and isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        if ok and default and all(isinstance(d, int) for d in default):
            ok = all(isinstance(v, int) for v in value)
        if ok and key != "zones.b" and len(value) != len(default):
            raise ConfigError(f"{key} needs {len(default)} entries, got {len(value)}")
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    sections = {f.name: f for f in fields(ExperimentConfig)}
    built = {}
    for name, body in raw.items():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        default = sections[name].default_factory()
        known = {f.name: getattr(default, f.name) for f in fields(default)}
        values = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            values[key] = _coerce(f"{name}.{key}", known[key], value)
        built[name] = replace(default, **values)
    cfg = ExperimentConfig(**built)
    validate_config(cfg)
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read a TOML config. Every key has a default except ``experiment.name``."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw.get("experiment"), dict) or "name" not in raw["experiment"]:
        raise ConfigError(f"{path}: missing experiment.name")
    cfg = config_from_dict(raw)
    if cfg.data.dataset and not Path(cfg.data.dataset).is_absolute():
        # dataset paths are relative to the config file
        resolved = str((Path(path).parent / cfg.data.dataset).resolve())
        cfg = replace(cfg, data=replace(cfg.data, dataset=resolved))
    return cfg


def validate_config(cfg: ExperimentConfig):
    if not cfg.zones.b or min(cfg.zones.b) < 1:
        raise ConfigError("zones.b must list zone counts >= 1")
    if cfg.train.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype must be 'float32' or 'float64'")
    if cfg.train.split_train_count < 0:
        raise ConfigError("train.split_train_count must be >= 0")
    if cfg.mobility.repeats < 1:
        raise ConfigError("mobility.repeats must be >= 1")
    if cfg.transform.n_c > cfg.scene.num_subcarriers:
        raise ConfigError("transform.n_c cannot exceed scene.num_subcarriers")
