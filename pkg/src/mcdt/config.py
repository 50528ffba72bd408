"""Scenario configuration.

Configs are YAML mappings whose sections mirror the dataclasses below; any
omitted key keeps its default. Defaults reproduce the two-agent field setup:
40 Hz camera at 2040x1086, detector at 3.89 Hz, state updates at 100 Hz,
formation standoff 8 m at 8 m altitude, person walking a 3 m square for
120 s. Units are SI; angles in config files are degrees.

The injected localization bias on the second agent (0.5, -0.3, 0.2) m is
synthetic. World frame: x east, y north, z up.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .detector import DetectorNoiseModel
from .geometry import CameraModel, HeightModel
from .netbus import LinkModel
from .tracker import MotionModelParams, TrackerConfig
from .world import FormationConfig, PersonTrajectory


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class CameraSection:
    width: int = 2040
    height: int = 1086
    hfov_deg: float = 90.0
    # None: tilt so the formation's standoff point looks at the person
    mount_pitch_deg: float | None = None


@dataclass(frozen=True)
class HeightSection:
    mu_h: float = 1.7
    sigma_h: float = 0.05
    radius: float = 0.2


@dataclass(frozen=True)
class PersonSection:
    kind: str = "square_walk"
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    edge: float = 3.0
    speed: float = 0.5
    person_height: float = 1.7
    waypoints: tuple[tuple[float, float, float], ...] = ()


@dataclass(frozen=True)
class DetectorSection:
    var_top: float = 0.0014
    var_bottom: float = 0.0045
    var_left: float = 0.0039
    var_right: float = 0.0035
    p_max: float = 0.9
    knee_low: float = 0.10
    knee_high: float = 0.30
    p_fp: float = 0.0


@dataclass(frozen=True)
class MotionSection:
    lam: float = 1.0
    sigma_acc: float = 1.0


@dataclass(frozen=True)
class TrackerSection:
    gate_threshold: float = 5.0
    max_lag: float = 0.5
    confidence_threshold: float = 0.5
    margin: float = 1.25
    bias_gain: float = 0.05
    processing_period: float = 1.0 / 3.89
    init_position_std: float = 0.3
    init_velocity_std: float = 0.3
    # only relative self-pose biases are observable; this agent fixes the common offset (None: no anchor)
    bias_anchor_agent: int | None = 0


@dataclass(frozen=True)
class FormationSection:
    d_per: float = 8.0
    h_mav: float = 8.0
    azimuth_offsets_deg: tuple[float, ...] = (0.0, 90.0)
    max_speed: float = 3.0
    gain: float = 1.0
    r_min: float = 2.0


@dataclass(frozen=True)
class LinkSection:
    latency_base: float = 0.020
    latency_jitter_std: float = 0.005
    drop_prob: float = 0.01


@dataclass(frozen=True)
class LocalizationSection:
    position_noise_std: float = 0.03
    angle_noise_std_deg: float = 0.1
    # per-agent constant (or slowly varying) self-pose position bias
    biases: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0), (0.5, -0.3, 0.2))
    bias_period: float = 0.0


@dataclass(frozen=True)
class RatesSection:
    state_hz: float = 100.0
    camera_hz: float = 40.0
    keepalive_hz: float = 10.0


@dataclass(frozen=True)
class AblationSection:
    active_roi: bool = True
    bias_correction: bool = True
    cooperative: bool = True


SUBSYSTEMS = ("world", "detector", "localization", "network")


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 120.0
    n_agents: int = 2
    seeds: dict[str, int] = field(default_factory=lambda: {name: 0 for name in SUBSYSTEMS})
    camera: CameraSection = CameraSection()
    height_model: HeightSection = HeightSection()
    person: PersonSection = PersonSection()
    detector: DetectorSection = DetectorSection()
    motion: MotionSection = MotionSection()
    tracker: TrackerSection = TrackerSection()
    formation: FormationSection = FormationSection()
    link: LinkSection = LinkSection()
    localization: LocalizationSection = LocalizationSection()
    rates: RatesSection = RatesSection()
    ablation: AblationSection = AblationSection()
    # agents whose estimates are scored; empty means all
    scored_agents: tuple[int, ...] = ()

    # ---- derived objects -------------------------------------------------

    def formation_config(self) -> FormationConfig:
        f = self.formation
        return FormationConfig(f.d_per, f.h_mav, tuple(math.radians(a) for a in f.azimuth_offsets_deg),
                               f.max_speed, f.gain, f.r_min)

    def trajectory(self) -> PersonTrajectory:
        p = self.person
        return PersonTrajectory(p.kind, tuple(p.origin), p.edge, p.speed, p.person_height,
                                tuple(tuple(w) for w in p.waypoints))

    def mount_pitch_deg(self) -> float:
        if self.camera.mount_pitch_deg is not None:
            return self.camera.mount_pitch_deg
        z = 0.5 * self.person.person_height
        fc = self.formation_config()
        return math.degrees(math.atan2(fc.h_mav - z, fc.standoff(z)))

    def camera_model(self) -> CameraModel:
        c = self.camera
        return CameraModel.from_fov(c.width, c.height, c.hfov_deg, self.mount_pitch_deg())

    def height(self) -> HeightModel:
        h = self.height_model
        return HeightModel(h.mu_h, h.sigma_h, h.radius)

    def detector_model(self) -> DetectorNoiseModel:
        return DetectorNoiseModel(**dataclasses.asdict(self.detector))

    def motion_params(self) -> MotionModelParams:
        return MotionModelParams(self.motion.lam, self.motion.sigma_acc)

    def link_model(self) -> LinkModel:
        return LinkModel(**dataclasses.asdict(self.link))

    def tracker_config(self, agent: int | None = None) -> TrackerConfig:
        t, a = self.tracker, self.ablation
        anchor = agent is not None and agent == t.bias_anchor_agent
        return TrackerConfig(t.gate_threshold, t.max_lag, t.confidence_threshold, t.margin, t.bias_gain,
                             t.processing_period, 1.0 / self.rates.camera_hz,
                             a.active_roi, a.bias_correction, a.cooperative, anchor)

    def agent_bias(self, agent: int) -> tuple[float, float, float]:
        b = self.localization.biases
        return tuple(b[agent]) if agent < len(b) else (0.0, 0.0, 0.0)

    def scored(self) -> tuple[int, ...]:
        return self.scored_agents or tuple(range(self.n_agents))

    # ---- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> ScenarioConfig:
        return dataclasses.replace(self, seeds={name: int(seed) for name in SUBSYSTEMS})

    def with_ablation(self, **flags) -> ScenarioConfig:
        return dataclasses.replace(self, ablation=dataclasses.replace(self.ablation, **flags))

    def validate(self) -> ScenarioConfig:
        problems = []
        if not self.duration > 0:
            problems.append("duration: must be > 0")
        if self.n_agents < 1:
            problems.append("n_agents: must be >= 1")
        for name in self.seeds:
            if name not in SUBSYSTEMS:
                problems.append(f"seeds.{name}: unknown subsystem (expected one of {', '.join(SUBSYSTEMS)})")
        for a in self.scored_agents:
            if not 0 <= a < self.n_agents:
                problems.append(f"scored_agents: agent {a} out of range")
        if self.rates.state_hz <= 0 or self.rates.camera_hz <= 0 or self.rates.keepalive_hz < 0:
            problems.append("rates: must be positive")
        if len(self.formation.azimuth_offsets_deg) < 1:
            problems.append("formation.azimuth_offsets_deg: need at least one entry")
        builders = {
            "camera": self.camera_model, "height_model": self.height, "person": self.trajectory,
            "detector": self.detector_model, "motion": self.motion_params, "formation": self.formation_config,
            "link": self.link_model,
        }
        for name, build in builders.items():
            try:
                build()
            except (ValueError, TypeError) as exc:
                problems.append(f"{name}: {exc}")
        if self.localization.position_noise_std < 0 or self.localization.angle_noise_std_deg < 0:
            problems.append("localization: noise standard deviations must be >= 0")
        if self.localization.bias_period and self.localization.bias_period < 60:
            problems.append("localization.bias_period: must be 0 (constant) or >= 60 s")
        if not 0 < self.tracker.bias_gain <= 1:
            problems.append("tracker.bias_gain: must lie in (0, 1]")
        anchor = self.tracker.bias_anchor_agent
        if anchor is not None and not 0 <= anchor < self.n_agents:
            problems.append(f"tracker.bias_anchor_agent: agent {anchor} out of range")
        if self.tracker.processing_period < 0:
            problems.append("tracker.processing_period: must be >= 0")
        if problems:
            raise ConfigError(problems)
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path: str, problems: list[str]):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(tp, value, path, problems)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, problems)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list")
            return None
        inner = args[0] if len(args) == 2 and args[1] is Ellipsis else None
        if inner is None:
            if len(value) != len(args):
                problems.append(f"{path}: expected {len(args)} values")
                return None
            return tuple(_coerce(a, v, f"{path}[{i}]", problems) for i, (a, v) in enumerate(zip(args, value)))
        return tuple(_coerce(inner, v, f"{path}[{i}]", problems) for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            problems.append(f"{path}: expected a mapping")
            return None
        return {str(k): _coerce(args[1], v, f"{path}.{k}", problems) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false")
        return value
    if tp in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return None
        if tp is int and float(value) != int(value):
            problems.append(f"{path}: expected an integer")
            return None
        return tp(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
        return value
    return value


def _build(cls, data, path: str, problems: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected a mapping")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path + '.' if path else ''}{f.name}", problems)
    if problems:
        return None
    return cls(**kwargs)


def config_from_dict(data: dict) -> ScenarioConfig:
    problems: list[str] = []
    cfg = _build(ScenarioConfig, data, "", problems)
    if problems:
        raise ConfigError(problems)
    if "seeds" in (data or {}):
        # partial seed maps keep the defaults for unnamed subsystems
        cfg = dataclasses.replace(cfg, seeds={**{n: 0 for n in SUBSYSTEMS}, **cfg.seeds})
    return cfg.validate()


def load_config(path: str | Path | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: YAML parse error: {exc}"]) from exc
    except OSError as exc:
        raise ConfigError([f"<file>: {exc}"]) from exc
    return config_from_dict(data or {})


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
