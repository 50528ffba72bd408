"""Closed-loop scenario execution and the ablation suite."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .config import SUBSYSTEMS, ScenarioConfig
from .detector import SimFrame
from .geometry import BBox, GeometryError, Pose6D, camera_pose, person_bbox
from .metrics import (
    MetricsError,
    NoAttempts,
    detection_rate,
    fit_reference_square,
    mse_stationary,
    nees,
)
from .netbus import MessageBus, MessageKind
from .runlog import RunLog
from .tracker import CDTAgent, TrackState, predicted_position
from .world import (
    EventKind,
    MavTruth,
    Scheduler,
    formation_step,
    observe_self_pose,
    person_position,
    tick_schedule,
)


def stream(cfg: ScenarioConfig, subsystem: str, agent: int = 0) -> np.random.Generator:
    """Independent random stream per (subsystem, agent)."""
    seed = cfg.seeds.get(subsystem, 0)
    return np.random.default_rng(np.random.SeedSequence([int(seed), SUBSYSTEMS.index(subsystem), agent]))


@dataclass
class RunResult:
    log: RunLog
    config: ScenarioConfig
    messages_sent: int = 0
    messages_delivered: int = 0
    messages_dropped: int = 0


def simulate(cfg: ScenarioConfig, trace: TextIO | None = None) -> RunResult:
    """Run the full loop: world ticks, frames, detector, trackers and bus."""
    cfg.validate()
    agents = list(range(cfg.n_agents))
    camera = cfg.camera_model()
    height_model = cfg.height()
    det_model = cfg.detector_model()
    motion = cfg.motion_params()
    tcfg = cfg.tracker_config()
    formation = cfg.formation_config()
    traj = cfg.trajectory()
    loc = cfg.localization
    person_radius = cfg.height_model.radius

    p0 = person_position(traj, 0.0)
    v0 = (person_position(traj, 1e-3) - p0) / 1e-3
    init_rng = stream(cfg, "world")
    truths, trackers = {}, {}
    for a in agents:
        start = formation.target(a, p0)
        truths[a] = MavTruth(
            Pose6D.from_yaw(start, math.atan2(p0[1] - start[1], p0[0] - start[0])),
            localization_bias=np.asarray(cfg.agent_bias(a), float),
            position_noise_std=np.full(3, loc.position_noise_std),
            angle_noise_std=np.full(3, math.radians(loc.angle_noise_std_deg)),
            bias_period=loc.bias_period,
        )
        sp, sv = cfg.tracker.init_position_std, cfg.tracker.init_velocity_std
        P0 = np.diag([sp**2] * 3 + [sv**2] * 3)
        x0 = np.concatenate([p0, v0]) + init_rng.standard_normal(6) * np.sqrt(np.diag(P0))
        track = TrackState(x0, P0, 0.0)
        trackers[a] = CDTAgent(a, track, camera, height_model, det_model, motion, cfg.tracker_config(a),
                               stream(cfg, "detector", a))

    loc_rng = {a: stream(cfg, "localization", a) for a in agents}
    bus = MessageBus(agents, cfg.link_model(), stream(cfg, "network"), trace)
    sched = Scheduler(tick_schedule(cfg.duration, agents, cfg.rates.state_hz, cfg.rates.camera_hz))
    dt_state = 1.0 / cfg.rates.state_hz
    keepalive_every = (int(round(cfg.rates.state_hz / cfg.rates.keepalive_hz))
                       if cfg.rates.keepalive_hz > 0 else 0)

    reported = {a: observe_self_pose(truths[a], loc_rng[a], 0.0) for a in agents}
    inbox = {a: [] for a in agents}
    pending = {a: [0, 0, None] for a in agents}  # attempted, succeeded, last measurement
    keepalive_seq = {a: 0 for a in agents}
    runlog = RunLog()
    nan3 = (math.nan, math.nan, math.nan)
    truth_t, truth = None, None

    for ev in sched:
        a, t = ev.agent, ev.time
        if ev.kind == EventKind.STATE:
            tracker = trackers[a]
            if ev.index > 0:
                truths[a] = formation_step(truths[a], tracker.track.position, formation, dt_state, a)
            reported[a] = observe_self_pose(truths[a], loc_rng[a], t)
            if keepalive_every and ev.index % keepalive_every == 0:
                msg = tracker.message(MessageKind.SELF_POSE, t, tracker.corrected_pose(reported[a]))
                keepalive_seq[a] += 1
                for r, td in bus.send(msg):
                    sched.post(td, EventKind.DELIVERY, r)
            mean, C = predicted_position(tracker.track, t, motion)
            if t != truth_t:
                truth_t, truth = t, person_position(traj, t)
            roi = tracker.roi if tcfg.active_roi else tracker.full_roi
            att, suc, meas = pending[a]
            mpos = truths[a].true_pose.position
            rep = reported[a].position
            b = tracker.bias.bias
            runlog.append((
                t, a, *truth, *mean,
                C[0, 0], C[0, 1], C[0, 2], C[1, 1], C[1, 2], C[2, 2],
                *(meas if meas is not None else nan3),
                roi.left, roi.top, roi.right, roi.bottom,
                att, suc, *mpos, truths[a].true_pose.yaw, *rep, *b,
            ))
            pending[a] = [0, 0, None]
        elif ev.kind == EventKind.DELIVERY:
            inbox[a].extend(bus.deliver_due(a, t))
        else:
            person = person_position(traj, t)
            box = _frame_bbox(camera, truths[a].true_pose, person, traj.person_height, person_radius)
            frame = SimFrame(t, box, a)
            res = trackers[a].cdt_step(frame, inbox[a], reported[a])
            inbox[a] = []
            for msg in res.messages:
                for r, td in bus.send(msg):
                    sched.post(td, EventKind.DELIVERY, r)
            if res.attempted:
                pending[a][0] += 1
            if res.succeeded:
                pending[a][1] += 1
                pending[a][2] = tuple(res.own_measurement.mean)

    return RunResult(runlog, cfg, bus.stats.sent, bus.stats.delivered, bus.stats.dropped)


def _frame_bbox(camera, body_pose, person, person_height, radius) -> BBox | None:
    try:
        box = person_bbox(camera, camera_pose(camera, body_pose), person, person_height, radius)
    except GeometryError:
        return None
    if box.right <= 0 or box.left >= camera.width or box.bottom <= 0 or box.top >= camera.height:
        return None
    return box


def run_scenario(cfg: ScenarioConfig, trace: TextIO | None = None) -> RunLog:
    return simulate(cfg, trace).log


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    variant: str
    config_digest: str
    seed: int
    scenario: str
    scored_agents: list[int]
    mse2d: float
    mse3d: float
    truth_mse2d: float
    truth_mse3d: float
    detection_rates: dict[str, float]
    nees: float
    messages: dict[str, int] = field(default_factory=dict)
    notes: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _nan_if(fn, *args):
    try:
        return fn(*args)
    except MetricsError:
        return math.nan


def metrics_report(runlog: RunLog, cfg: ScenarioConfig, variant: str = "online",
                   agents: tuple[int, ...] | None = None, result: RunResult | None = None) -> MetricsReport:
    """Score a run the way the field experiments were scored.

    Stationary person: MSE about the mean estimate. Square walk: MSE to the
    best-fitting 3 m reference square. Waypoints: MSE to ground truth.
    """
    agents = tuple(agents if agents is not None else cfg.scored())
    rows = np.isin(runlog.column("agent"), agents)
    est = runlog.columns(("est_x", "est_y", "est_z"))[rows]
    truth = runlog.columns(("true_x", "true_y", "true_z"))[rows]
    err = est - truth
    t_mse2d = float(np.mean(np.sum(err[:, :2] ** 2, axis=1))) if len(err) else math.nan
    t_mse3d = float(np.mean(np.sum(err**2, axis=1))) if len(err) else math.nan
    kind = cfg.person.kind
    if kind == "stationary":
        mse2d, mse3d = _nan_if(mse_stationary, est) if len(est) >= 2 else (math.nan, math.nan)
    elif kind == "square_walk":
        try:
            _, mse2d, mse3d = fit_reference_square(est, cfg.person.edge)
        except MetricsError:
            mse2d = mse3d = math.nan
    else:
        mse2d, mse3d = t_mse2d, t_mse3d
    rates = {}
    for a in agents:
        try:
            rates[str(a)] = detection_rate(runlog, a)
        except NoAttempts:
            rates[str(a)] = math.nan
    nees_vals = [_nan_if(nees, runlog, a) for a in agents]
    msgs = {}
    if result is not None:
        msgs = {"sent": result.messages_sent, "delivered": result.messages_delivered,
                "dropped": result.messages_dropped}
    note = ""
    if any(any(cfg.agent_bias(a)) for a in range(cfg.n_agents)):
        note = "synthetic injected localization bias"
    return MetricsReport(variant, cfg.digest(), int(cfg.seeds.get("world", 0)), kind, list(agents),
                         float(mse2d), float(mse3d), t_mse2d, t_mse3d, rates,
                         float(np.nanmean(nees_vals)) if not all(map(math.isnan, nees_vals)) else math.nan,
                         msgs, note)


VARIANTS = ("online", "no_spbc", "no_as_roi")


def variant_config(base: ScenarioConfig, name: str) -> ScenarioConfig:
    if name == "online":
        return base
    if name == "no_spbc":
        return base.with_ablation(bias_correction=False)
    if name == "no_as_roi":
        return base.with_ablation(active_roi=False)
    if name.startswith("single_"):
        agent = int(name.split("_", 1)[1])
        cfg = base.with_ablation(cooperative=False)
        return dataclasses.replace(cfg, scored_agents=(agent,))
    raise ValueError(f"unknown variant {name!r}")


def variant_names(base: ScenarioConfig) -> list[str]:
    names = list(VARIANTS)
    if base.n_agents > 1:
        names += [f"single_{a}" for a in range(base.n_agents)]
    return names


def run_ablation_suite(base: ScenarioConfig, variants: list[str] | None = None,
                       logs: dict[str, RunLog] | None = None) -> list[MetricsReport]:
    """One report per variant, all sharing the base seeds.

    Single-agent variants differ only in which agent is scored, so they share
    one non-cooperative run.
    """
    names = variants or variant_names(base)
    reports = []
    cache: dict[str, RunResult] = {}
    for name in names:
        cfg = variant_config(base, name)
        key = "single" if name.startswith("single_") else name
        if key not in cache:
            run_cfg = dataclasses.replace(cfg, scored_agents=()) if key == "single" else cfg
            cache[key] = simulate(run_cfg)
        res = cache[key]
        if logs is not None:
            logs[name] = res.log
        reports.append(metrics_report(res.log, cfg, name, cfg.scored(), res))
    return reports
