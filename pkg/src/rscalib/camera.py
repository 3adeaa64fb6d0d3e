"""Pinhole camera with equidistant distortion and rolling-shutter timing.

The projection follows the four-parameter equidistant model: with incidence
angle theta = atan2(r, z) the distorted angle is

    theta_d = theta * (1 + k1 theta^2 + k2 theta^4 + k3 theta^6 + k4 theta^8)

and the pixel is (fu * theta_d * x/r + cu, fv * theta_d * y/r + cv).
Each image row v is exposed d seconds after the previous one, so an
observation in the frame stamped t_f maps to IMU-clock time
t_f + t_IC + v*d (first-row convention) or t_f + t_IC + (v - height/2)*d
(central-row convention).
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DomainError, ProjectionConvergenceError
from .geometry import PoseSplineView, RigidTransform

FIRST_ROW = "first_row"
CENTRAL_ROW = "central_row"

_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fu: float
    fv: float
    cu: float
    cv: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cu < self.width and 0 < self.cv < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def distortion(self):
        return np.array([self.k1, self.k2, self.k3, self.k4])


@dataclass(frozen=True)
class CameraTemporal:
    """Temporal model: clock offset to the IMU plus per-row line delay."""

    t_IC: float = 0.0
    line_delay: float = 0.0
    timestamp_convention: str = FIRST_ROW

    def __post_init__(self):
        if self.line_delay < 0:
            raise ValueError("line delay must be nonnegative")
        if abs(self.t_IC) >= 0.5:
            raise ValueError(f"implausible time offset {self.t_IC} s")
        if self.timestamp_convention not in (FIRST_ROW, CENTRAL_ROW):
            raise ValueError(f"unknown convention {self.timestamp_convention!r}")


@dataclass(frozen=True)
class Observation:
    frame_timestamp: float
    landmark_id: int
    pixel: tuple  # (u, v)


def _distort_theta(theta, dist):
    t2 = theta * theta
    return theta * (1.0 + t2 * (dist[0] + t2 * (dist[1] + t2 * (dist[2] + t2 * dist[3]))))


def _distort_theta_deriv(theta, dist):
    t2 = theta * theta
    return (1.0 + t2 * (3.0 * dist[0] + t2 * (5.0 * dist[1]
            + t2 * (7.0 * dist[2] + t2 * 9.0 * dist[3]))))


def project(intr: Intrinsics, points):
    """Project camera-frame points to pixels. Points must have z > 1e-6."""
    pts = np.asarray(points, dtype=float)
    if np.any(pts[..., 2] <= _MIN_DEPTH):
        raise BehindCameraError("point behind or too close to the camera plane")
    return project_unchecked(intr, pts)


def project_unchecked(intr: Intrinsics, points):
    """Projection without the depth guard; garbage in, garbage out.

    Batch callers that mask invalid points afterwards use this to avoid
    data-dependent exceptions.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = np.where(pts[..., 2] > _MIN_DEPTH, pts[..., 2], 1.0)
    r = np.hypot(pts[..., 0], pts[..., 1])
    theta = np.arctan2(r, z)
    theta_d = _distort_theta(theta, intr.distortion)
    # scale = theta_d / r is finite as r -> 0 (theta ~ r/z); take the limit there
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 0, theta_d / np.where(r > 0, r, 1.0), 1.0 / z)
    uv = np.empty(pts.shape[:-1] + (2,))
    uv[..., 0] = intr.fu * scale * pts[..., 0] + intr.cu
    uv[..., 1] = intr.fv * scale * pts[..., 1] + intr.cv
    return uv[0] if single else uv


def project_jacobian(intr: Intrinsics, points):
    """d(pixel)/d(point) for camera-frame points, shape (..., 2, 3)."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    r = np.hypot(x, y)
    rho2 = r * r + z * z
    theta = np.arctan2(r, z)
    theta_d = _distort_theta(theta, intr.distortion)
    dtheta_d = _distort_theta_deriv(theta, intr.distortion)

    small = r < 1e-12
    r_safe = np.where(small, 1.0, r)
    # u = fu * theta_d(theta) * x / r; derivatives via theta(r, z) = atan2(r, z)
    s = theta_d / r_safe
    ds_dr = (dtheta_d * z / rho2 - s) / r_safe       # d(theta_d/r)/dr
    ds_dz = -dtheta_d / rho2
    # r -> 0 limits: s -> 1/z, ds_dr -> 0 (even function), ds_dz -> -1/z^2
    s = np.where(small, 1.0 / z, s)
    ds_dr = np.where(small, 0.0, ds_dr)
    ds_dz = np.where(small, -1.0 / (z * z), ds_dz)
    with np.errstate(invalid="ignore", divide="ignore"):
        xr = np.where(small, 0.0, x / r_safe)
        yr = np.where(small, 0.0, y / r_safe)

    J = np.empty(pts.shape[:-1] + (2, 3))
    J[..., 0, 0] = intr.fu * (s + x * ds_dr * xr)
    J[..., 0, 1] = intr.fu * (x * ds_dr * yr)
    J[..., 0, 2] = intr.fu * (x * ds_dz)
    J[..., 1, 0] = intr.fv * (y * ds_dr * xr)
    J[..., 1, 1] = intr.fv * (s + y * ds_dr * yr)
    J[..., 1, 2] = intr.fv * (y * ds_dz)
    return J[0] if single else J


def unproject(intr: Intrinsics, pixels, max_iter: int = 20, tol: float = 1e-12):
    """Invert projection to a unit bearing via Newton iteration on theta."""
    px = np.asarray(pixels, dtype=float)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    mx = (px[..., 0] - intr.cu) / intr.fu
    my = (px[..., 1] - intr.cv) / intr.fv
    theta_d = np.hypot(mx, my)
    theta = theta_d.copy()
    for _ in range(max_iter):
        f = _distort_theta(theta, intr.distortion) - theta_d
        step = f / _distort_theta_deriv(theta, intr.distortion)
        theta = theta - step
        if np.all(np.abs(step) <= tol):
            break
    else:
        raise ProjectionConvergenceError("distortion inversion did not converge")
    small = theta_d < 1e-12
    safe = np.where(small, 1.0, theta_d)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    out = np.empty(px.shape[:-1] + (3,))
    out[..., 0] = np.where(small, mx, sin_t * mx / safe)
    out[..., 1] = np.where(small, my, sin_t * my / safe)
    out[..., 2] = np.where(small, 1.0, cos_t)
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out[0] if single else out


def row_offset(temporal: CameraTemporal, row_v, height: int = 0):
    """Row term entering the observation time, convention applied."""
    row = np.asarray(row_v, dtype=float)
    if temporal.timestamp_convention == CENTRAL_ROW:
        return row - height / 2.0
    return row


def observation_time(temporal: CameraTemporal, frame_timestamp, row_v,
                     height: int = 0):
    """IMU-clock exposure time of image row v in the given frame.

    With the central-row convention the stored frame timestamp refers to row
    height/2, so the row term is measured from the image center.
    """
    return (np.asarray(frame_timestamp, dtype=float) + temporal.t_IC
            + row_offset(temporal, row_v, height) * temporal.line_delay)


def line_delay_from_specs(line_length_px: int, pixel_clock_hz: float) -> float:
    """Line delay from sensor specs: line length over pixel clock."""
    if line_length_px <= 0 or pixel_clock_hz <= 0:
        raise ValueError("line length and pixel clock must be positive")
    return line_length_px / pixel_clock_hz


def reprojection_residual(obs: Observation, pose_spline: PoseSplineView,
                          T_CI: RigidTransform, temporal: CameraTemporal,
                          intr: Intrinsics, landmark_W, sigma_c: float = 1.0):
    """Whitened pixel residual of one observation against the trajectory.

    The observation time uses the measured row of the observation. Raises
    DomainError when that time falls outside the spline domain and
    BehindCameraError when the landmark maps behind the image plane; callers
    drop and count such observations.
    """
    u, v = obs.pixel
    t_obs = float(observation_time(temporal, obs.frame_timestamp, v, intr.height))
    if not pose_spline.spline.contains(t_obs):
        raise DomainError(f"observation time {t_obs} outside trajectory domain")
    T_WI = pose_spline.pose_at(t_obs)
    x_I = T_WI.rotation.T @ (np.asarray(landmark_W, dtype=float) - T_WI.translation)
    x_C = T_CI.rotation @ x_I + T_CI.translation
    return (project(intr, x_C) - np.array([u, v], dtype=float)) / sigma_c
