"""Per-agent cooperative detector and tracker.

The person state is ``[p (3), v (3)]`` in the world frame. Between
measurements the velocity decays exponentially (``dp = v dt``,
``dv = -lambda v dt + sigma_acc dW``), so a track without detections comes
to rest instead of drifting off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .detector import Detection, DetectorNoiseModel, InvalidRoi, Roi, SimFrame, detect, detector_timing
from .geometry import (
    CameraModel,
    GeometryError,
    HeightModel,
    PointBehindCamera,
    Pose6D,
    backproject_with_height,
    camera_pose,
    person_bbox,
    project_point,
    project_with_covariance,
    silhouette_offset,
    symmetrize,
)
from .netbus import AgentMessage, MessageKind

log = logging.getLogger(__name__)

MIN_ROI_WIDTH = 32.0
MIN_ROI_HEIGHT = 24.0
ASPECT = 4.0 / 3.0
COND_LIMIT = 1e12


class TrackingError(ValueError):
    pass


class NegativeDt(TrackingError):
    pass


class StaleMeasurement(TrackingError):
    pass


@dataclass(frozen=True)
class MotionModelParams:
    lam: float = 1.0
    sigma_acc: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.sigma_acc < 0:
            raise ValueError("lambda and sigma_acc must be non-negative")


@dataclass(frozen=True)
class TrackState:
    mean: np.ndarray  # (6,) position then velocity
    covariance: np.ndarray  # (6, 6)
    timestamp: float

    @property
    def position(self) -> np.ndarray:
        return self.mean[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[3:]

    @classmethod
    def from_pv(cls, position, velocity, covariance, timestamp: float) -> TrackState:
        return cls(np.concatenate([np.asarray(position, float), np.asarray(velocity, float)]),
                   np.asarray(covariance, float), float(timestamp))


@dataclass(frozen=True)
class DetectionMeasurement:
    mean: np.ndarray
    covariance: np.ndarray
    source_agent: int
    timestamp: float


@dataclass(frozen=True)
class BiasEstimate:
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gain: float = 0.05
    # spread of the estimate itself, added to corrected measurements
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must lie in (0, 1]")
        if not np.all(np.isfinite(self.bias)):
            raise ValueError("bias must be finite")


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


def _coefficients(sign_fn, n0: int, terms: int = 25) -> tuple[float, ...]:
    out, fact = [], math.factorial(n0)
    for n in range(n0, n0 + terms):
        out.append(sign_fn(n) / fact)
        fact *= n + 1
    return tuple(out[::-1])


# exact noise integrals expanded in x = lam*dt, to avoid cancellation for small x
_G = _coefficients(lambda n: (-1) ** (n + 1) * (2 ** (n - 1) - 2), 3)
_H = _coefficients(lambda n: (-1) ** (n + 1) * (1 - 2 ** (n - 1)), 2)


def transition_blocks(dt: float, params: MotionModelParams) -> tuple[float, float, float, float, float]:
    """Per-axis transition (phi, decay) and process noise (q_pp, q_pv, q_vv)."""
    return _blocks(float(dt), float(params.lam), float(params.sigma_acc))


def _horner(coeffs: tuple[float, ...], x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


@lru_cache(maxsize=4096)
def _blocks(dt: float, lam: float, sigma_acc: float) -> tuple[float, float, float, float, float]:
    q = sigma_acc**2
    x = lam * dt
    decay = math.exp(-x)
    if x < 1e-8:
        phi = dt
    else:
        phi = -math.expm1(-x) / lam
    if x < 0.5:
        g = _horner(_G, x)
        h = _horner(_H, x)
        w = 1.0 if x == 0 else -math.expm1(-2 * x) / (2 * x)
        return phi, decay, q * dt**3 * g, q * dt**2 * h, q * dt * w
    e1, e2 = -math.expm1(-x), -math.expm1(-2 * x)
    q_pp = q / lam**2 * (dt - 2 * e1 / lam + e2 / (2 * lam))
    q_pv = q / lam * (e1 / lam - e2 / (2 * lam))
    q_vv = q * e2 / (2 * lam)
    return phi, decay, q_pp, q_pv, q_vv


_I3 = np.eye(3)


@lru_cache(maxsize=256)
def _cached_matrices(dt: float, lam: float, sigma_acc: float) -> tuple[np.ndarray, np.ndarray]:
    phi, decay, q_pp, q_pv, q_vv = _blocks(dt, lam, sigma_acc)
    F = np.kron([[1.0, phi], [0.0, decay]], _I3)
    Q = np.kron([[q_pp, q_pv], [q_pv, q_vv]], _I3)
    F.flags.writeable = False
    Q.flags.writeable = False
    return F, Q


def transition_matrices(dt: float, params: MotionModelParams) -> tuple[np.ndarray, np.ndarray]:
    return _cached_matrices(float(dt), float(params.lam), float(params.sigma_acc))


def ekf_predict(state: TrackState, dt: float, params: MotionModelParams) -> TrackState:
    if dt < 0:
        raise NegativeDt(f"dt={dt}")
    if dt == 0:
        return state
    F, Q = transition_matrices(dt, params)
    P = F @ state.covariance @ F.T + Q
    return TrackState(F @ state.mean, symmetrize(P), state.timestamp + dt)


def predicted_position(state: TrackState, t: float, params: MotionModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean (6,) and position covariance (3, 3) at ``t``; cheaper than a full prediction."""
    dt = t - state.timestamp
    if dt <= 0:
        return state.mean, state.covariance[:3, :3]
    phi, decay, q_pp, _, _ = transition_blocks(dt, params)
    m, P = state.mean, state.covariance
    mean = np.concatenate([m[:3] + phi * m[3:], decay * m[3:]])
    Pxv = P[:3, 3:]
    cov = P[:3, :3] + phi * (Pxv + Pxv.T) + phi * phi * P[3:, 3:]
    cov[np.diag_indices(3)] += q_pp
    return mean, cov


def predict_to(state: TrackState, t: float, params: MotionModelParams) -> TrackState:
    return ekf_predict(state, t - state.timestamp, params) if t > state.timestamp else state


# --------------------------------------------------------------------------
# update
# --------------------------------------------------------------------------


def mahalanobis(state: TrackState, z: DetectionMeasurement) -> float:
    y = z.mean - state.mean[:3]
    S = state.covariance[:3, :3] + z.covariance
    return float(math.sqrt(max(y @ np.linalg.solve(S, y), 0.0)))


def try_update(state: TrackState, z: DetectionMeasurement, gate_threshold: float = 5.0,
               max_lag: float = 0.5) -> tuple[TrackState, str | None]:
    """Kalman update with a position observation; returns (state, rejection reason)."""
    if abs(z.timestamp - state.timestamp) > max_lag:
        raise StaleMeasurement(f"lag {z.timestamp - state.timestamp:.3f} s exceeds {max_lag} s")
    P = state.covariance
    y = z.mean - state.mean[:3]
    S = symmetrize(P[:3, :3] + z.covariance)
    if np.linalg.cond(S) > COND_LIMIT:
        return state, "singular innovation covariance"
    S_inv = np.linalg.inv(S)
    d2 = float(y @ S_inv @ y)
    if d2 > gate_threshold**2:
        return state, f"gated (distance {math.sqrt(d2):.2f})"
    K = P[:, :3] @ S_inv
    I_KH = np.eye(6)
    I_KH[:, :3] -= K
    P_new = I_KH @ P @ I_KH.T + K @ z.covariance @ K.T
    return TrackState(state.mean + K @ y, symmetrize(P_new), state.timestamp), None


def ekf_update(state: TrackState, z: DetectionMeasurement, gate_threshold: float = 5.0,
               max_lag: float = 0.5) -> TrackState:
    """Fuse one world-frame position measurement; rejected measurements leave the state unchanged."""
    new, reason = try_update(state, z, gate_threshold, max_lag)
    if reason is not None:
        log.debug("measurement from agent %s rejected: %s", z.source_agent, reason)
    return new


# --------------------------------------------------------------------------
# ROI selection
# --------------------------------------------------------------------------


def clip_roi(left: float, top: float, right: float, bottom: float, width: float, height: float) -> Roi:
    """Clip to the image and enforce the minimum ROI size."""
    l, r = max(left, 0.0), min(right, float(width))
    t, b = max(top, 0.0), min(bottom, float(height))
    if r - l < MIN_ROI_WIDTH:
        c = min(max(0.5 * (l + r), MIN_ROI_WIDTH / 2), width - MIN_ROI_WIDTH / 2)
        l, r = c - MIN_ROI_WIDTH / 2, c + MIN_ROI_WIDTH / 2
    if b - t < MIN_ROI_HEIGHT:
        c = min(max(0.5 * (t + b), MIN_ROI_HEIGHT / 2), height - MIN_ROI_HEIGHT / 2)
        t, b = c - MIN_ROI_HEIGHT / 2, c + MIN_ROI_HEIGHT / 2
    return Roi(l, t, r, b)


@dataclass(frozen=True)
class RoiGeometry:
    """Un-clipped ROI construction, kept for diagnostics and tests."""

    center_u: float
    head_v: float
    feet_v: float
    sigma_head: float
    sigma_feet: float
    left: float
    top: float
    right: float
    bottom: float


def roi_geometry(state: TrackState, camera: CameraModel, camera_world_pose: Pose6D,
                 height_model: HeightModel, margin: float = 1.25, n_sigma: float = 3.0) -> RoiGeometry:
    p = state.mean[:3]
    P = state.covariance[:3, :3]
    e = silhouette_offset(camera_world_pose.position, p, 0.5 * height_model.mu_h, height_model.radius)
    P_ends = P.copy()
    P_ends[2, 2] += height_model.sigma_h**2 / 4.0
    center = project_point(camera, camera_world_pose, p)
    head, C_head = project_with_covariance(camera, camera_world_pose, p + e, P_ends)
    feet, C_feet = project_with_covariance(camera, camera_world_pose, p - e, P_ends)
    person_h = feet[1] - head[1]
    if person_h <= 0:
        raise GeometryError("predicted person appears inverted")
    s_head, s_feet = math.sqrt(max(C_head[1, 1], 0.0)), math.sqrt(max(C_feet[1, 1], 0.0))
    # v grows downward, so the band expands up from the head and down from the feet
    top, bottom = head[1] - n_sigma * s_head, feet[1] + n_sigma * s_feet
    min_h = margin * person_h
    if bottom - top < min_h:
        mid = 0.5 * (top + bottom)
        top, bottom = mid - 0.5 * min_h, mid + 0.5 * min_h
    half_w = 0.5 * ASPECT * (bottom - top)
    return RoiGeometry(center.u, head[1], feet[1], s_head, s_feet,
                       center.u - half_w, top, center.u + half_w, bottom)


def predict_roi(state: TrackState, params: MotionModelParams, camera: CameraModel,
                camera_world_pose: Pose6D, height_model: HeightModel, roi_dt: float,
                margin: float = 1.25) -> Roi:
    """ROI for the next detection: 3-sigma head/feet band at a 4:3 aspect ratio."""
    predicted = ekf_predict(state, max(roi_dt, 0.0), params)
    try:
        g = roi_geometry(predicted, camera, camera_world_pose, height_model, margin)
    except (PointBehindCamera, GeometryError) as exc:
        log.debug("ROI fallback to full image: %s", exc)
        return Roi.full(camera.width, camera.height)
    return clip_roi(g.left, g.top, g.right, g.bottom, camera.width, camera.height)


# --------------------------------------------------------------------------
# self-pose bias
# --------------------------------------------------------------------------


def update_bias(bias: BiasEstimate, own_z_world: np.ndarray, fused_position: np.ndarray,
                residual_cov: np.ndarray | None = None) -> BiasEstimate:
    """Exponential moving average of the own-detection residual.

    With ``residual_cov`` the spread of the average is tracked as well,
    ``C' = (1-g)^2 C + g^2 R``, treating successive residuals as independent.
    """
    g = bias.gain
    new = (1.0 - g) * bias.bias + g * (np.asarray(own_z_world, float) - np.asarray(fused_position, float))
    cov = bias.covariance
    if residual_cov is not None:
        cov = symmetrize((1.0 - g) ** 2 * cov + g**2 * np.asarray(residual_cov, float))
    return replace(bias, bias=new, covariance=cov)


# --------------------------------------------------------------------------
# the per-agent loop
# --------------------------------------------------------------------------


REFERENCE_MAX_AGE = 1.0  # s since the last teammate update of the reference track


@dataclass(frozen=True)
class TrackerConfig:
    gate_threshold: float = 5.0
    max_lag: float = 0.5
    confidence_threshold: float = 0.5
    margin: float = 1.25
    bias_gain: float = 0.05
    processing_period: float = 1.0 / 3.89
    frame_interval: float = 1.0 / 40.0
    active_roi: bool = True
    bias_correction: bool = True
    cooperative: bool = True
    # the anchor agent's frame is taken as the shared world frame; it never learns a bias
    bias_anchor: bool = False
    covariance_at_prediction: bool = True
    debias_measurements: bool = True


@dataclass
class StepResult:
    track: TrackState
    roi: Roi
    messages: list[AgentMessage]
    attempted: bool = False
    succeeded: bool = False
    own_measurement: DetectionMeasurement | None = None
    rejected: int = 0
    stale: int = 0


class CDTAgent:
    """Cooperative detector and tracker running on one agent."""

    def __init__(self, agent_id: int, track: TrackState, camera: CameraModel,
                 height_model: HeightModel, detector_model: DetectorNoiseModel,
                 motion: MotionModelParams, config: TrackerConfig, rng: np.random.Generator):
        self.agent_id = agent_id
        self.track = track
        self.camera = camera
        self.height_model = height_model
        self.detector_model = detector_model
        self.motion = motion
        self.config = config
        self.rng = rng
        self.full_roi = Roi.full(camera.width, camera.height)
        self.roi = self.full_roi
        self.bias = BiasEstimate(gain=config.bias_gain)
        # teammates-only track: the bias residual must not be measured against our own past detections
        learns_bias = config.bias_correction and config.cooperative and not config.bias_anchor
        self.reference: TrackState | None = track if learns_bias else None
        self._reference_fresh_at = -math.inf
        self.busy_until = 0.0
        self._seq = {MessageKind.SELF_POSE: 0, MessageKind.DETECTION: 0}

    def corrected_pose(self, self_pose: Pose6D) -> Pose6D:
        if not self.config.bias_correction:
            return self_pose
        return self_pose.translated(-self.bias.bias)

    def message(self, kind: MessageKind, t: float, payload) -> AgentMessage:
        seq = self._seq[kind]
        self._seq[kind] = seq + 1
        return AgentMessage(kind, self.agent_id, seq, t, payload)

    def measure(self, det: Detection, cam_pose: Pose6D, t: float,
                predicted: TrackState | None = None) -> DetectionMeasurement:
        """World measurement of a detection.

        With ``predicted`` given, the covariance is evaluated at the box the
        predicted person would produce. Depth variance grows with the fourth
        power of depth, so evaluating it at the measured box would give
        detections that look nearer more weight and pull the track toward
        the camera.
        """
        variances = det.pixel_variances()
        mean, cov = backproject_with_height(self.camera, cam_pose, det.bbox, variances, self.height_model,
                                            debias=self.config.debias_measurements)
        if predicted is not None and self.config.covariance_at_prediction:
            hm = self.height_model
            try:
                box = person_bbox(self.camera, cam_pose, predicted.position, hm.mu_h, hm.radius)
                _, cov = backproject_with_height(self.camera, cam_pose, box, variances, hm)
            except GeometryError:
                pass
        if self.config.bias_correction:
            cov = cov + self.bias.covariance
        return DetectionMeasurement(mean, cov, self.agent_id, t)

    def cdt_step(self, frame: SimFrame, inbox: list[AgentMessage], self_pose: Pose6D) -> StepResult:
        """One pass of the detect / share / predict / fuse / ROI / bias loop at ``frame.timestamp``."""
        cfg = self.config
        t = frame.timestamp
        messages: list[AgentMessage] = []
        own: DetectionMeasurement | None = None
        pose = self.corrected_pose(self_pose)
        cam_pose = None

        # detect on the previous ROI if the detector is free
        accepted, busy = detector_timing(self.busy_until, t, cfg.processing_period, cfg.frame_interval)
        predicted = predict_to(self.track, t, self.motion)
        if accepted:
            self.busy_until = busy
            roi = self.roi if cfg.active_roi else self.full_roi
            try:
                dets = detect(frame, roi, self.detector_model, self.rng)
            except InvalidRoi:
                dets = []
            cam_pose = camera_pose(self.camera, pose)
            best = math.inf
            for det in dets:
                if det.confidence < cfg.confidence_threshold:
                    continue
                try:
                    z = self.measure(det, cam_pose, t, predicted)
                except GeometryError:
                    continue
                d = mahalanobis(predicted, z)
                if d < best:
                    best, own = d, z
            messages.append(self.message(MessageKind.SELF_POSE, t, pose))
            if own is not None:
                messages.append(self.message(MessageKind.DETECTION, t, own))

        teammates = []
        if cfg.cooperative:
            teammates = sorted(
                (m.payload for m in inbox if m.kind == MessageKind.DETECTION and m.sender != self.agent_id),
                key=lambda z: (z.timestamp, z.source_agent))

        result = StepResult(predicted, self.roi, messages, attempted=accepted, succeeded=own is not None,
                            own_measurement=own)
        track = predicted
        own_fused = False
        for z in ([own] if own is not None else []) + teammates:
            try:
                track, reason = try_update(track, z, cfg.gate_threshold, cfg.max_lag)
            except StaleMeasurement:
                result.stale += 1
                continue
            if reason is not None:
                result.rejected += 1
                log.debug("agent %d dropped measurement from %d: %s", self.agent_id, z.source_agent, reason)
            elif z is own:
                own_fused = True
        changed = track is not predicted or accepted
        self.track = track

        if self.reference is not None:
            ref = predict_to(self.reference, t, self.motion)
            for z in teammates:
                try:
                    ref, reason = try_update(ref, z, cfg.gate_threshold, cfg.max_lag)
                except StaleMeasurement:
                    continue
                if reason is None:
                    self._reference_fresh_at = t
            self.reference = ref

        if changed and cfg.active_roi:
            if cam_pose is None:
                cam_pose = camera_pose(self.camera, pose)
            roi_dt = max(self.busy_until - t, 0.0)
            self.roi = predict_roi(track, self.motion, self.camera, cam_pose, self.height_model, roi_dt,
                                   cfg.margin)

        if own_fused and self.reference is not None and t - self._reference_fresh_at <= REFERENCE_MAX_AGE:
            raw = own.mean + self.bias.bias
            resid_cov = own.covariance - self.bias.covariance + self.reference.covariance[:3, :3]
            self.bias = update_bias(self.bias, raw, self.reference.position, resid_cov)

        result.track = self.track
        result.roi = self.roi
        return result
