"""Versioned run configuration: one TOML file, one section per module."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .data import SplitSpec
from .dynamics import DEFAULT_MOMENT_ARMS, MomentArms, WristDynamicsParams
from .model import ModelConfig
from .sigproc import ChainConfig
from .synth import ExcitationProfile, PopulationConfig
from .training import METHODS, SCENARIOS, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class SchemaVersionError(ConfigError):
    pass


@dataclass(frozen=True)
class DynamicsSection:
    inertia: float = 0.004
    damping: float = 0.05
    mass: float = 0.5
    com_length: float = 0.1
    gravity: float = 9.81
    moment_arms: tuple = DEFAULT_MOMENT_ARMS

    def params(self) -> WristDynamicsParams:
        return WristDynamicsParams(self.inertia, self.damping, self.mass, self.com_length,
                                   self.gravity)

    def arms(self) -> MomentArms:
        return MomentArms(tuple(self.moment_arms))


@dataclass(frozen=True)
class PopulationSection:
    fmax_nominal: tuple = (12.0, 10.0, 10.0, 9.0, 8.0)
    fmax_mult: tuple = (0.7, 1.3)
    tau_act: tuple = (0.010, 0.020)
    tau_deact: tuple = (0.040, 0.060)
    emg_gain: tuple = (0.5, 2.0)
    emg_noise_sd: float = 0.02
    arm_mult: tuple = (0.9, 1.1)
    inertia_mult: tuple = (0.8, 1.2)
    damping_mult: tuple = (0.8, 1.2)
    mass_mult: tuple = (0.8, 1.2)
    com_mult: tuple = (0.9, 1.1)
    phase_jitter_sd: float = 0.15


@dataclass(frozen=True)
class SynthSection:
    n_subjects: int = 8
    n_trials: int = 5
    duration: float = 2.0        # seconds per trial
    fs: float = 1000.0
    fs_emg: float = 2000.0
    base_freq: float = 1.0
    amplitude: float = 0.6
    trial_phase_jitter_sd: float = 0.3
    format: str = "binary"


@dataclass(frozen=True)
class SigprocSection:
    bandpass_low: float = 20.0
    bandpass_high: float = 450.0
    envelope_fc: float = 6.0
    order: int = 4
    clip: float = 1.5
    window: int = 16
    stride: int = 1
    split: tuple = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class ModelSection:
    conv_channels: int = 128
    hidden: int = 128
    kernel: int = 3
    pad: int = 3
    dropout: float = 0.5
    conv_norm: str = "window"
    dense_norm: str = "running"
    norm_warmup: int = 50
    norm_momentum: float = 0.01
    standardize_targets: bool = False


@dataclass(frozen=True)
class TrainingSection:
    max_iter: int = 2000
    lr: float = 0.001
    momentum: float = 0.9
    segment_len: int = 5
    patience: int = 200
    min_delta: float = 1e-5
    eval_every: int = 50
    val_segments: int = 32
    iteration_unit: str = "steps"
    restore_best: bool = True
    clip_norm: float = 5.0       # 0 disables
    physics_weight: float = 1.0
    physics_dyn_scale: float = 1.0


@dataclass(frozen=True)
class ExperimentSection:
    methods: tuple = METHODS
    scenario: str = "multiple"
    heldout: int = 0             # 0 means the last subject
    seeds: tuple = (0,)
    fractions: tuple = (1.0,)
    generic: tuple = ()          # single scenario: generic subject ids; empty = every other


SECTIONS = {
    "dynamics": DynamicsSection,
    "population": PopulationSection,
    "synth": SynthSection,
    "sigproc": SigprocSection,
    "model": ModelSection,
    "training": TrainingSection,
    "experiment": ExperimentSection,
}


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    population: PopulationSection = field(default_factory=PopulationSection)
    synth: SynthSection = field(default_factory=SynthSection)
    sigproc: SigprocSection = field(default_factory=SigprocSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ex = self.experiment
        bad = [m for m in ex.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
        if ex.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {ex.scenario!r}")
        if any(not 0 < f <= 1 for f in ex.fractions):
            raise ConfigError(f"fractions must lie in (0, 1]: {ex.fractions}")
        if len(self.dynamics.moment_arms) != len(self.population.fmax_nominal):
            raise ConfigError("moment_arms and fmax_nominal disagree on muscle count")
        if self.synth.format not in ("binary", "csv"):
            raise ConfigError(f"synth.format must be 'binary' or 'csv', got {self.synth.format!r}")
        if self.model.conv_norm not in ("window", "running", "batch"):
            raise ConfigError(f"model.conv_norm must be window, running or batch, "
                              f"got {self.model.conv_norm!r}")
        if self.model.dense_norm not in ("running", "batch"):
            raise ConfigError(f"model.dense_norm must be running or batch, "
                              f"got {self.model.dense_norm!r}")
        self.dynamics.params()
        SplitSpec(*self.sigproc.split)
        self.train_config()

    # -- module configs ----------------------------------------------------

    def population_config(self) -> PopulationConfig:
        return PopulationConfig(**dataclasses.asdict(self.population),
                                dynamics=self.dynamics.params(), arms=self.dynamics.arms())

    def profile(self) -> ExcitationProfile:
        s = self.synth
        return ExcitationProfile(s.base_freq, s.amplitude, s.trial_phase_jitter_sd, s.duration)

    def chain(self) -> ChainConfig:
        s = self.sigproc
        return ChainConfig(s.bandpass_low, s.bandpass_high, s.envelope_fc, s.order)

    def split(self) -> SplitSpec:
        return SplitSpec(*self.sigproc.split)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_muscles=len(self.dynamics.moment_arms), window=self.sigproc.window,
                           **dataclasses.asdict(self.model))

    def train_config(self) -> TrainConfig:
        d = dataclasses.asdict(self.training)
        d["clip_norm"] = d["clip_norm"] or None
        return TrainConfig(**d)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def replace(self, section: str | None = None, **kw) -> "RunConfig":
        if section is None:
            return dataclasses.replace(self, **kw)
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, name: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    out = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{name}.{k} must be an array")
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{k} must be a boolean")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k} must be a number")
            v = float(v)
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}.{k} must be an integer")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{name}.{k} must be a string")
        out[k] = v
    return cls(**out)


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"config schema_version {version} is not supported "
                                 f"(expected {SCHEMA_VERSION})")
    seed = d.pop("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _coerce(cls, name, d[name]) for name, cls in SECTIONS.items() if name in d}
    try:
        return RunConfig(version, seed, **sections)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> RunConfig:
    try:
        return from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def reference_rows() -> list[tuple[str, str, object]]:
    """``(section, key, default)`` for every config key, in declaration order."""
    rows = [("", "schema_version", SCHEMA_VERSION), ("", "seed", 0)]
    for name, cls in SECTIONS.items():
        inst = cls()
        rows.extend((name, f.name, _plain(getattr(inst, f.name))) for f in fields(cls))
    return rows
