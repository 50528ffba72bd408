"""Ground truth: person motion, agent kinematics, localization error, clock."""

from __future__ import annotations

import copy
import heapq
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from enum import IntEnum
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .geometry import Pose6D, quat_exp, quat_mul


@dataclass(frozen=True)
class PersonTrajectory:
    """Ground-plane path of the person.

    ``origin`` is the ground point of a stationary person or the center of
    the square; a square walk starts at the south-west corner heading east
    and goes counter-clockwise.
    """

    kind: str = "square_walk"  # stationary | square_walk | waypoint_list
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    edge: float = 3.0
    speed: float = 0.5
    person_height: float = 1.7
    waypoints: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("stationary", "square_walk", "waypoint_list"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "square_walk" and self.edge <= 0:
            raise ValueError("edge must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.kind == "waypoint_list" and len(self.waypoints) < 1:
            raise ValueError("waypoint_list needs at least one waypoint")

    @property
    def centroid_height(self) -> float:
        return 0.5 * self.person_height

    def corners(self) -> np.ndarray:
        return np.array(self._corner_tuple())

    def _corner_tuple(self) -> tuple:
        (x, y, z), a = self.origin, 0.5 * self.edge
        return ((x - a, y - a, z), (x + a, y - a, z), (x + a, y + a, z), (x - a, y + a, z))


@lru_cache(maxsize=64)
def _polyline(points: tuple, closed: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    P = np.asarray(points, float)
    if closed:
        P = np.vstack([P, P[:1]])
    seg = np.diff(P, axis=0)
    return P, seg, np.linalg.norm(seg, axis=1)


def _along_polyline(points, s: float, closed: bool) -> np.ndarray:
    if not isinstance(points, tuple):
        points = tuple(map(tuple, np.asarray(points, float).tolist()))
    P, seg, lengths = _polyline(points, closed)
    total = float(lengths.sum())
    if total == 0:
        return P[0].copy()
    s = math.fmod(s, total) if closed else min(s, total)
    for i, L in enumerate(lengths.tolist()):
        if s <= L and L > 0:
            return P[i] + seg[i] * (s / L)
        s -= L
    return P[-1].copy()


def person_position(traj: PersonTrajectory, t: float) -> np.ndarray:
    """Person centroid at time ``t`` (z is half the person height above ground)."""
    lift = np.array([0.0, 0.0, traj.centroid_height])
    if traj.kind == "stationary" or traj.speed == 0:
        base = np.asarray(traj.origin if traj.kind != "waypoint_list" else traj.waypoints[0], float)
        if traj.kind == "square_walk":
            base = traj.corners()[0]
        return base + lift
    if traj.kind == "square_walk":
        return _along_polyline(traj._corner_tuple(), traj.speed * t, closed=True) + lift
    return _along_polyline(tuple(map(tuple, traj.waypoints)), traj.speed * t, closed=False) + lift


@dataclass(frozen=True)
class MavTruth:
    true_pose: Pose6D
    localization_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position_noise_std: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angle_noise_std: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # 0 -> constant bias, otherwise bias * cos(2 pi t / period)
    bias_period: float = 0.0

    def __post_init__(self):
        for name in ("localization_bias", "position_noise_std", "angle_noise_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if np.any(self.position_noise_std < 0) or np.any(self.angle_noise_std < 0):
            raise ValueError("noise standard deviations must be non-negative")
        if self.bias_period and self.bias_period < 60.0:
            raise ValueError("time-varying bias period must be at least 60 s")

    @cached_property
    def reported_covariance(self) -> np.ndarray:
        return np.diag(np.concatenate([self.position_noise_std, self.angle_noise_std]) ** 2)

    def bias_at(self, t: float) -> np.ndarray:
        if not self.bias_period:
            return self.localization_bias
        return self.localization_bias * math.cos(2.0 * math.pi * t / self.bias_period)


@dataclass(frozen=True)
class FormationConfig:
    d_per: float = 8.0
    h_mav: float = 8.0
    azimuth_offsets: tuple[float, ...] = (0.0, math.pi / 2)
    max_speed: float = 3.0
    gain: float = 1.0
    r_min: float = 2.0

    def __post_init__(self):
        if self.d_per <= 0 or self.h_mav <= 0:
            raise ValueError("d_per and h_mav must be positive")

    def standoff(self, person_z: float) -> float:
        dz = self.h_mav - person_z
        return math.sqrt(max(self.d_per**2 - dz**2, self.r_min**2))

    def azimuth(self, agent: int) -> float:
        return self.azimuth_offsets[agent % len(self.azimuth_offsets)]

    def target(self, agent: int, person_estimate) -> np.ndarray:
        x, y, z = (float(c) for c in person_estimate[:3])
        r, az = self.standoff(z), self.azimuth(agent)
        return np.array([x + r * math.cos(az), y + r * math.sin(az), self.h_mav])


def facing_yaw(position, target) -> float:
    return math.atan2(target[1] - position[1], target[0] - position[0])


def formation_step(agent_truth: MavTruth, person_estimate, cfg: FormationConfig, dt: float,
                   agent: int = 0) -> MavTruth:
    """Move toward the standoff point with saturated proportional control, yaw to face the person."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    pos = agent_truth.true_pose.position
    v = cfg.gain * (cfg.target(agent, person_estimate) - pos)
    speed = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if speed > cfg.max_speed:
        v *= cfg.max_speed / speed
    new_pos = pos + v * dt
    pose = Pose6D.from_yaw(new_pos, facing_yaw(new_pos, person_estimate))
    moved = copy.copy(agent_truth)
    object.__setattr__(moved, "true_pose", pose)
    return moved


def observe_self_pose(agent_truth: MavTruth, rng: np.random.Generator, t: float = 0.0) -> Pose6D:
    """Reported self-pose: truth plus bias plus white noise.

    The reported covariance covers only the white noise; the bias is the
    unmodeled error the tracker has to learn. Always draws six normals.
    """
    z = rng.standard_normal(6)
    truth = agent_truth.true_pose
    pos = truth.position + agent_truth.bias_at(t) + agent_truth.position_noise_std * z[:3]
    ang = agent_truth.angle_noise_std * z[3:]
    cov = agent_truth.reported_covariance
    if ang.any():
        q = quat_mul(truth.orientation, quat_exp(ang))
        return Pose6D(pos, q / math.sqrt(q @ q), cov)
    return Pose6D(pos, truth.orientation, cov)


class EventKind(IntEnum):
    # value doubles as the tie-break rank at equal timestamps
    STATE = 0
    DELIVERY = 1
    FRAME = 2


class Event(NamedTuple):
    # tuple order is the processing order
    time: float
    kind: EventKind
    agent: int
    index: int = 0  # tick / frame number, or delivery sequence


def tick_schedule(duration: float, agents: Sequence[int] = (0,), state_rate: float = 100.0,
                  frame_rate: float = 40.0) -> list[Event]:
    """Static part of the event stream: state ticks and camera frames in [0, duration)."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    events = []
    n_state = int(math.ceil(duration * state_rate - 1e-9))
    n_frame = int(math.ceil(duration * frame_rate - 1e-9))
    for a in agents:
        events.extend(Event(k / state_rate, EventKind.STATE, a, k) for k in range(n_state))
        events.extend(Event(k / frame_rate, EventKind.FRAME, a, k) for k in range(n_frame))
    events.sort()
    return events


class Scheduler:
    """Merges the static schedule with deliveries posted while running."""

    def __init__(self, static: list[Event]):
        self._heap = list(static)
        heapq.heapify(self._heap)
        self._n = 0

    def post(self, time: float, kind: EventKind, agent: int) -> None:
        self._n += 1
        heapq.heappush(self._heap, Event(time, kind, agent, self._n))

    def __iter__(self) -> Iterator[Event]:
        while self._heap:
            yield heapq.heappop(self._heap)
