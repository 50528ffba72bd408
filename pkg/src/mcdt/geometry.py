"""Coordinate frames, pinhole projection and covariance propagation.

Conventions
-----------
World frame: x east, y north, z up (meters).
Body frame: x forward, y left, z up.
Camera frame: X right, Y down, Z forward (optical axis).
Image: u to the right, v downward, origin at the top-left pixel corner.

Pose covariances are 6x6 over ``(dp_world, dtheta_local)``: a world-frame
position perturbation followed by a small-angle rotation applied on the
right, i.e. ``R_true = R @ exp([dtheta]x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

EPS_DEPTH = 1e-6


class GeometryError(ValueError):
    pass


class PointBehindCamera(GeometryError):
    pass


class DegenerateBox(GeometryError):
    pass


# --------------------------------------------------------------------------
# rotation helpers
# --------------------------------------------------------------------------


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula. ``w`` may be (3,) or (n, 3)."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
        K = skew(w)
        if theta < 1e-8:
            a, b = 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0
        else:
            a, b = math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta**2
        return np.eye(3) + a * K + b * (K @ K)
    theta = np.linalg.norm(w, axis=1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    K = np.zeros((w.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -w[:, 2], w[:, 1]
    K[:, 1, 0], K[:, 1, 2] = w[:, 2], -w[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -w[:, 1], w[:, 0]
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return R


def quat_exp(w) -> np.ndarray:
    """Unit quaternion of the rotation vector ``w`` (same rotation as so3_exp)."""
    wx, wy, wz = float(w[0]), float(w[1]), float(w[2])
    theta = math.sqrt(wx * wx + wy * wy + wz * wz)
    half = 0.5 * theta
    k = 0.5 - theta**2 / 48.0 if theta < 1e-8 else math.sin(half) / theta
    return np.array([math.cos(half), k * wx, k * wy, k * wz])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w, x, y, z) with w >= 0."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(pitch: float) -> np.ndarray:
    c, s = math.cos(pitch), math.sin(pitch)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def symmetrize(C: np.ndarray) -> np.ndarray:
    return 0.5 * (C + C.T)


# --------------------------------------------------------------------------
# types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    """Fixed transform; maps points of the child frame into the parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @cached_property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation @ p + self.translation


@dataclass(frozen=True)
class Pose6D:
    """World-frame 6D pose with covariance; orientation is body-to-world."""

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float))

    @cached_property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    @classmethod
    def from_rotation(cls, position, R, covariance=None) -> Pose6D:
        cov = np.zeros((6, 6)) if covariance is None else covariance
        R = np.asarray(R, float)
        pose = cls(np.asarray(position, float), matrix_to_quat(R), cov)
        pose.__dict__["rotation"] = R  # seed the cache; exact up to quaternion rounding
        return pose

    @classmethod
    def from_yaw(cls, position, yaw: float, covariance=None) -> Pose6D:
        half = 0.5 * yaw
        cov = np.zeros((6, 6)) if covariance is None else covariance
        return cls(position, np.array([math.cos(half), 0.0, 0.0, math.sin(half)]), cov)

    @property
    def yaw(self) -> float:
        R = self.rotation
        return math.atan2(R[1, 0], R[0, 0])

    def translated(self, offset: np.ndarray) -> Pose6D:
        return Pose6D(self.position + offset, self.orientation, self.covariance)

    def check(self, tol: float = 1e-9) -> None:
        if abs(np.linalg.norm(self.orientation) - 1.0) > tol:
            raise GeometryError("orientation quaternion is not unit norm")
        check_covariance(self.covariance, tol)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # camera pose expressed in the body frame
    extrinsics: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the sensor")

    @classmethod
    def from_fov(cls, width: int = 2040, height: int = 1086, hfov_deg: float = 90.0,
                 mount_pitch_deg: float = 0.0) -> CameraModel:
        """Square-pixel camera looking along body +x, pitched down by ``mount_pitch_deg``."""
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height, forward_mount(mount_pitch_deg))


def forward_mount(pitch_down_deg: float = 0.0, offset=(0.0, 0.0, 0.0)) -> RigidTransform:
    # columns: camera X (right), Y (down), Z (forward) in FLU body axes
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return RigidTransform(rot_y(math.radians(pitch_down_deg)) @ base, np.asarray(offset, float))


@dataclass(frozen=True)
class HeightModel:
    """Person height prior; ``radius`` widens the silhouette (0 = thin pole)."""

    mu_h: float = 1.7
    sigma_h: float = 0.05
    radius: float = 0.0

    def __post_init__(self):
        if self.mu_h <= 0 or self.sigma_h < 0 or self.radius < 0:
            raise GeometryError("invalid height model")


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class BBox:
    top: float
    bottom: float
    left: float
    right: float

    def __post_init__(self):
        if not (self.top < self.bottom and self.left < self.right):
            raise DegenerateBox(f"invalid box {self}")

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def center(self) -> PixelPoint:
        return PixelPoint(0.5 * (self.left + self.right), 0.5 * (self.top + self.bottom))

    @property
    def area(self) -> float:
        return self.height * self.width

    def as_array(self) -> np.ndarray:
        return np.array([self.top, self.bottom, self.left, self.right])


def check_covariance(C: np.ndarray, tol: float = 1e-9) -> None:
    if np.max(np.abs(C - C.T), initial=0.0) > tol:
        raise GeometryError("covariance not symmetric")
    if C.size and np.min(np.linalg.eigvalsh(symmetrize(C))) < -tol:
        raise GeometryError("covariance not positive semi-definite")


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def compose_pose(a: Pose6D, b: RigidTransform) -> Pose6D:
    """Chain a fixed child transform onto ``a`` (e.g. body pose -> camera pose).

    The covariance is carried over to the child frame:
    ``dp' = dp - R_a [t_b]x dtheta`` and ``dtheta' = R_b^T dtheta``.
    """
    Ra = a.rotation
    if a.covariance.any():
        J = np.zeros((6, 6))
        J[:3, :3] = np.eye(3)
        J[:3, 3:] = -Ra @ skew(b.translation)
        J[3:, 3:] = b.rotation.T
        cov = symmetrize(J @ a.covariance @ J.T)
    else:
        cov = np.zeros((6, 6))
    q = quat_mul(a.orientation, b.quaternion)
    pose = Pose6D(a.position + Ra @ b.translation, q / math.sqrt(q @ q), cov)
    pose.__dict__["rotation"] = Ra @ b.rotation
    return pose


def transform_pose(T: RigidTransform, a: Pose6D) -> Pose6D:
    """Express ``a`` in another world frame: ``p' = R p + t``, ``R' = R R_a``.

    The world-frame position perturbation rotates with the frame
    (``Sigma_p' = R Sigma_p R^T``); the body-frame angle perturbation is unchanged.
    """
    R = T.rotation
    J = np.eye(6)
    J[:3, :3] = R
    cov = symmetrize(J @ a.covariance @ J.T)
    q = quat_mul(T.quaternion, a.orientation)
    pose = Pose6D(R @ a.position + T.translation, q / math.sqrt(q @ q), cov)
    pose.__dict__["rotation"] = R @ a.rotation
    return pose


def camera_pose(camera: CameraModel, body_pose: Pose6D) -> Pose6D:
    return compose_pose(body_pose, camera.extrinsics)


def to_camera(camera_world_pose: Pose6D, world_point: np.ndarray) -> np.ndarray:
    return camera_world_pose.rotation.T @ (np.asarray(world_point, float) - camera_world_pose.position)


def project_point(camera: CameraModel, camera_world_pose: Pose6D, world_point) -> PixelPoint:
    X, Y, Z = to_camera(camera_world_pose, world_point)
    if Z <= EPS_DEPTH:
        raise PointBehindCamera(f"depth {Z:.3g} m")
    return PixelPoint(camera.cx + camera.fx * X / Z, camera.cy + camera.fy * Y / Z)


def project_with_covariance(camera: CameraModel, camera_world_pose: Pose6D, world_point,
                            point_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project a Gaussian world point; pose uncertainty is included.

    Returns the pixel mean (u, v) and its 2x2 covariance from analytic
    first-order propagation.
    """
    R = camera_world_pose.rotation
    Xc = R.T @ (np.asarray(world_point, float) - camera_world_pose.position)
    X, Y, Z = Xc
    if Z <= EPS_DEPTH:
        raise PointBehindCamera(f"depth {Z:.3g} m")
    Jp = np.array([[camera.fx / Z, 0.0, -camera.fx * X / Z**2],
                   [0.0, camera.fy / Z, -camera.fy * Y / Z**2]])
    J_point = Jp @ R.T
    J_pose = np.hstack([-J_point, Jp @ skew(Xc)])
    cov = J_point @ point_cov @ J_point.T + J_pose @ camera_world_pose.covariance @ J_pose.T
    uv = np.array([camera.cx + camera.fx * X / Z, camera.cy + camera.fy * Y / Z])
    return uv, symmetrize(cov)


def silhouette_offset(camera_position: np.ndarray, point: np.ndarray, half_height: float,
                      radius: float) -> np.ndarray:
    """World offset from the person centroid to the top of its silhouette.

    The person is an upright cylinder; seen from the camera, the top of the
    silhouette is the far rim of the head disc and the bottom is the near rim
    of the feet disc, i.e. ``centroid -/+ offset``.
    """
    d = np.asarray(point, float) - camera_position
    n = math.hypot(d[0], d[1])
    if n < 1e-12 or radius == 0.0:
        return np.array([0.0, 0.0, half_height])
    return np.array([radius * d[0] / n, radius * d[1] / n, half_height])


def person_bbox(camera: CameraModel, camera_world_pose: Pose6D, centroid, height: float,
                radius: float = 0.0) -> BBox:
    """Full-image bounding box of an upright person, centered on the centroid's projection."""
    centroid = np.asarray(centroid, float)
    c = project_point(camera, camera_world_pose, centroid)
    e = silhouette_offset(camera_world_pose.position, centroid, 0.5 * height, radius)
    head = project_point(camera, camera_world_pose, centroid + e)
    feet = project_point(camera, camera_world_pose, centroid - e)
    h = feet.v - head.v
    if h <= 0:
        raise DegenerateBox("person appears inverted in the image")
    d = centroid - camera_world_pose.position
    n = math.hypot(d[0], d[1])
    side = np.array([-d[1] / n, d[0] / n, 0.0]) if n > 1e-12 else np.array([1.0, 0.0, 0.0])
    half_w = max(radius, 0.05)
    w = abs(project_point(camera, camera_world_pose, centroid + half_w * side).u
            - project_point(camera, camera_world_pose, centroid - half_w * side).u)
    w = max(w, 1e-3)
    return BBox(c.v - 0.5 * h, c.v + 0.5 * h, c.u - 0.5 * w, c.u + 0.5 * w)


# input vector layout for the image->world map
N_INPUTS = 11  # top, bottom, left, right, height, dp(3), dtheta(3)


def image_to_world(camera: CameraModel, camera_world_pose: Pose6D, inputs: np.ndarray,
                   radius: float = 0.0) -> np.ndarray:
    """Exact image->world map, vectorized over rows of ``inputs`` (n, 11).

    The centroid lies on the ray through the box center at the depth where
    the modeled silhouette spans exactly the observed box height.  With
    ``head = s*r + e`` and ``feet = s*r - e`` in camera coordinates
    (``r = ((u-cx)/fx, (v-cy)/fy, 1)``), the height condition is the
    quadratic ``h s^2 - k s - h e_z^2 = 0`` with ``k = 2 fy (r_y e_z - e_y)``.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    top, bottom, left, right, H = x[:, 0], x[:, 1], x[:, 2], x[:, 3], x[:, 4]
    h = bottom - top
    if np.any(h < 1.0):
        raise DegenerateBox("box height below 1 px")
    uc = 0.5 * (left + right)
    vc = 0.5 * (top + bottom)
    R = camera_world_pose.rotation @ so3_exp(x[:, 8:11])  # (n, 3, 3)
    pos = camera_world_pose.position + x[:, 5:8]

    ray_c = np.stack([(uc - camera.cx) / camera.fx, (vc - camera.cy) / camera.fy, np.ones_like(uc)], axis=1)
    ray_w = np.einsum("nij,nj->ni", R, ray_c)
    hn = np.hypot(ray_w[:, 0], ray_w[:, 1])
    scale = np.where(hn > 1e-12, radius / np.where(hn > 1e-12, hn, 1.0), 0.0)
    e_w = np.stack([ray_w[:, 0] * scale, ray_w[:, 1] * scale, 0.5 * H], axis=1)
    e_c = np.einsum("nji,nj->ni", R, e_w)  # R^T e_w

    k = 2.0 * camera.fy * (ray_c[:, 1] * e_c[:, 2] - e_c[:, 1])
    if np.any(k <= 0):
        raise DegenerateBox("observed box inconsistent with an upright person")
    s = (k + np.sqrt(k * k + 4.0 * h * h * e_c[:, 2] ** 2)) / (2.0 * h)
    if np.any(s <= EPS_DEPTH):
        raise PointBehindCamera("non-positive depth")
    return pos + s[:, None] * ray_w


def backproject_depth(camera: CameraModel, bbox: BBox, height: float) -> float:
    """Fronto-parallel depth estimate ``fy * H / h_px``."""
    if bbox.height < 1.0:
        raise DegenerateBox("box height below 1 px")
    return camera.fy * height / bbox.height


def fd_steps(x0: np.ndarray, rel: float = 1e-5, floor: float = 1e-7) -> np.ndarray:
    return np.maximum(rel * np.abs(x0), floor)


def central_jacobian(f, x0: np.ndarray, rel: float = 1e-5, floor: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """Value and central-difference Jacobian of a row-vectorized map ``f``."""
    n = x0.size
    steps = fd_steps(x0, rel, floor)
    X = np.tile(x0, (2 * n + 1, 1))
    idx = np.arange(n)
    X[1 + idx, idx] += steps
    X[1 + n + idx, idx] -= steps
    Y = f(X)
    J = (Y[1:1 + n] - Y[1 + n:]).T / (2.0 * steps)
    return Y[0], J


def input_covariance(bbox_noise, sigma_h: float, pose_cov: np.ndarray) -> np.ndarray:
    S = np.zeros((N_INPUTS, N_INPUTS))
    S[0, 0], S[1, 1], S[2, 2], S[3, 3] = bbox_noise
    S[4, 4] = sigma_h**2
    S[5:, 5:] = pose_cov
    return S


def backproject_inputs(bbox: BBox, mu_h: float) -> np.ndarray:
    x0 = np.zeros(N_INPUTS)
    x0[:4] = bbox.as_array()
    x0[4] = mu_h
    return x0


def sigma_offsets(S: np.ndarray) -> np.ndarray:
    """Rows ``L_k`` with ``sum_k L_k L_k^T = S`` (zero-variance directions dropped)."""
    w, V = np.linalg.eigh(symmetrize(S))
    keep = w > 0
    return (V[:, keep] * np.sqrt(w[keep])).T


def second_order_bias(f, x0: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``0.5 tr(H S)`` per output of a row-vectorized map, from symmetric sigma points."""
    L = sigma_offsets(S)
    Y = f(np.vstack([x0, x0 + L, x0 - L]))
    return _curvature(Y, len(L))


def _curvature(Y: np.ndarray, k: int) -> np.ndarray:
    return 0.5 * (Y[1:1 + k] + Y[1 + k:] - 2.0 * Y[0]).sum(axis=0)


def backproject_with_height(camera: CameraModel, camera_world_pose: Pose6D, bbox: BBox,
                            bbox_noise, height_model: HeightModel,
                            debias: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """World position of a detected person and its 3x3 covariance.

    ``bbox_noise`` holds absolute pixel variances for (top, bottom, left,
    right). The covariance is ``J S J^T`` with ``S`` the block-diagonal input
    covariance (box sides, person height, camera pose) and ``J`` a central
    finite-difference Jacobian of the exact map.

    Depth goes as one over the box height, so noisy boxes land beyond the
    person on average. ``debias`` subtracts the second-order mean offset.
    """
    if bbox.height < 1.0:
        raise DegenerateBox("box height below 1 px")
    x0 = backproject_inputs(bbox, height_model.mu_h)
    S = input_covariance(bbox_noise, height_model.sigma_h, camera_world_pose.covariance)

    def f(X):
        return image_to_world(camera, camera_world_pose, X, height_model.radius)

    n = x0.size
    steps = fd_steps(x0)
    X = np.tile(x0, (2 * n + 1, 1))
    idx = np.arange(n)
    X[1 + idx, idx] += steps
    X[1 + n + idx, idx] -= steps
    L = sigma_offsets(S) if debias else np.zeros((0, n))
    try:
        Y = f(np.vstack([X, x0 + L, x0 - L]))
    except GeometryError:
        if not len(L):
            raise
        # sigma points can leave the valid region for tiny boxes; skip the correction
        L = L[:0]
        Y = f(X)
    mean = Y[0]
    J = (Y[1:1 + n] - Y[1 + n:1 + 2 * n]).T / (2.0 * steps)
    if len(L):
        k = len(L)
        mean = mean - _curvature(np.vstack([Y[:1], Y[1 + 2 * n:]]), k)
    return mean, symmetrize(J @ S @ J.T)
