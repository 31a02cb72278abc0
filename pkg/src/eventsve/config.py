"""Declarative pipeline configuration (YAML) with validation and a stable hash."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError, InputError
from .events import EventParams
from .fusion import FusionParams
from .smoke import DEFAULT_EPSILON, DEFAULT_WEIGHTS, check_weights
from .synth import SimConfig


@dataclass(frozen=True)
class Inputs:
    mosaics: tuple = ()  # empty -> the simulator's output
    events_left: str | None = None
    events_right: str | None = None
    calibration: str | None = None
    registration: str | None = None
    scene: str | None = None  # scene file for ``simulate``; None -> built-in default scene
    column: tuple | None = None  # ((x, y, z), (x, y, z)) in mm; overrides the pixel pairs
    column_left: tuple | None = None  # ((u, v) of P1, (u, v) of P2) in the left view
    column_right: tuple | None = None


@dataclass(frozen=True)
class SveSection:
    transmittances: tuple = (1.0, 0.25, 0.0625, 0.015625)
    bit_depth: int = 16
    rescale: bool = False


@dataclass(frozen=True)
class SmokeSection:
    weights: tuple = DEFAULT_WEIGHTS
    M: int = 4
    window: int = 1
    epsilon: float = DEFAULT_EPSILON


@dataclass(frozen=True)
class StereoSection:
    max_epi_px: float = 3.0
    max_dt_us: float = 12.0
    scale_mode: str = "consistent"


@dataclass(frozen=True)
class SimulateSection:
    duration_us: float = 6000.0
    contrast_threshold: float = 0.15
    event_noise_rate: float = 0.2
    dt_us: float = 10.0
    gain: float = 2000.0
    read_noise: float = 0.0


@dataclass(frozen=True)
class ReportSection:
    bin_width: float = 0.05
    prominence: float = 0.2


_SECTIONS = {
    "inputs": Inputs,
    "sve": SveSection,
    "smoke": SmokeSection,
    "fusion": FusionParams,
    "events": EventParams,
    "stereo": StereoSection,
    "simulate": SimulateSection,
    "report": ReportSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    inputs: Inputs = field(default_factory=Inputs)
    sve: SveSection = field(default_factory=SveSection)
    smoke: SmokeSection = field(default_factory=SmokeSection)
    fusion: FusionParams = field(default_factory=FusionParams)
    events: EventParams = field(default_factory=EventParams)
    stereo: StereoSection = field(default_factory=StereoSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    report: ReportSection = field(default_factory=ReportSection)
    seed: int = 0
    threads: int = 1
    base_dir: str = "."  # relative input paths resolve against this

    def to_dict(self):
        d = asdict(self)
        return json.loads(json.dumps(d, default=list))

    def config_hash(self):
        """Hash of everything that can change an artifact.

        ``threads`` and ``base_dir`` are excluded: neither affects outputs.
        """
        d = self.to_dict()
        d.pop("threads")
        d.pop("base_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def sim_config(self):
        s = self.simulate
        return SimConfig(contrast_threshold=s.contrast_threshold, event_noise_rate=s.event_noise_rate,
                         transmittances=tuple(self.sve.transmittances), seed=self.seed, dt_us=s.dt_us,
                         bit_depth=self.sve.bit_depth, gain=s.gain, read_noise=s.read_noise)

    def validate(self):
        """Check bounds and that every explicitly named input exists."""
        check_weights(self.smoke.weights)
        if self.smoke.M < 2:
            raise ConfigError("smoke.M must be at least 2")
        if self.smoke.window < 1:
            raise ConfigError("smoke.window must be >= 1")
        if self.smoke.epsilon <= 0:
            raise ConfigError("smoke.epsilon must be positive")
        if len(self.sve.transmittances) != 4 or not all(0 < t <= 1 for t in self.sve.transmittances):
            raise ConfigError("sve.transmittances must be four values in (0, 1]")
        if not 1 <= self.sve.bit_depth <= 32:
            raise ConfigError("sve.bit_depth must lie in [1, 32]")
        if self.stereo.max_epi_px <= 0 or self.stereo.max_dt_us < 0:
            raise ConfigError("stereo.max_epi_px must be positive and max_dt_us non-negative")
        if self.stereo.scale_mode not in ("consistent", "literal"):
            raise ConfigError(f"unknown stereo.scale_mode {self.stereo.scale_mode!r}")
        if self.simulate.duration_us <= 0 or self.simulate.duration_us % self.events.window_us:
            raise ConfigError("simulate.duration_us must be a positive multiple of events.window_us")
        if self.report.bin_width <= 0 or not 0 <= self.report.prominence <= 1:
            raise ConfigError("report.bin_width must be positive and prominence in [0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.events.theta_vis is not None and not 0 <= self.events.theta_vis <= 1:
            raise ConfigError("events.theta_vis must lie in [0, 1]")
        if self.inputs.column is not None:
            col = self.inputs.column
            if len(col) != 2 or any(len(p) != 3 for p in col):
                raise ConfigError("inputs.column must be two 3-D points")
        if (self.inputs.column_left is None) != (self.inputs.column_right is None):
            raise ConfigError("inputs.column_left and inputs.column_right must be given together")
        for key in ("column_left", "column_right"):
            col = getattr(self.inputs, key)
            if col is not None and (len(col) != 2 or any(len(p) != 2 for p in col)):
                raise ConfigError(f"inputs.{key} must be two pixel points")
        named = list(self.inputs.mosaics)
        named += [getattr(self.inputs, k) for k in ("events_left", "events_right", "calibration",
                                                    "registration", "scene")]
        for p in named:
            if p is not None and not self.resolve(p).exists():
                raise InputError(f"missing input: {p}")
        return self


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build_section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in data.items()})
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(data, base_dir="."):
    data = dict(data or {})
    top = {}
    for name, cls in _SECTIONS.items():
        top[name] = _build_section(cls, data.pop(name, None), name)
    for key in ("seed", "threads"):
        if key in data:
            top[key] = int(data.pop(key))
    if data:
        raise ConfigError(f"unknown config keys: {sorted(data)}")
    return PipelineConfig(base_dir=str(base_dir), **top)


def load_config(path=None, **overrides):
    """Read a YAML config; ``overrides`` replace top-level scalars (seed, threads)."""
    if path is None:
        cfg = PipelineConfig()
    else:
        path = Path(path)
        if not path.exists():
            raise InputError(f"missing config file: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = config_from_dict(data, base_dir=path.parent)
    over = {k: v for k, v in overrides.items() if v is not None}
    if over:
        cfg = replace(cfg, **over)
    return cfg.validate()


def dump_config(cfg, path):
    d = cfg.to_dict()
    d.pop("base_dir")
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True))
