"""Inertial measurement prediction from the pose spline and IMU residuals.

Two measurement models are supported. The calibrated model corrupts ideal
specific force and angular rate with slowly varying biases only; the
scale-misalignment model additionally applies a lower-triangular matrix to
the accelerometer, a full 3x3 matrix to the gyroscope, and a g-sensitivity
matrix coupling specific force into the gyroscope:

    a_m = M_a a_s + b_a + noise
    w_m = M_g w   + M_s a_s + b_g + noise

Residuals are whitened by the per-sample standard deviation derived from the
continuous noise density, sigma * sqrt(rate).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import PoseSplineView, angle_axis_to_rotation, right_jacobian

CALIBRATED = "calibrated"
SCALE_MISALIGNMENT = "scale_misalignment"

STANDARD_GRAVITY = 9.80665


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities and the nominal sample rate."""

    sigma_a: float    # accelerometer white noise, m/s^2/sqrt(Hz)
    sigma_ba: float   # accelerometer bias random walk, m/s^3/sqrt(Hz)
    sigma_g: float    # gyroscope white noise, rad/s/sqrt(Hz)
    sigma_bg: float   # gyroscope bias random walk, rad/s^2/sqrt(Hz)
    rate_hz: float

    def __post_init__(self):
        for name in ("sigma_a", "sigma_ba", "sigma_g", "sigma_bg", "rate_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def accel_sample_std(self):
        return self.sigma_a * np.sqrt(self.rate_hz)

    @property
    def gyro_sample_std(self):
        return self.sigma_g * np.sqrt(self.rate_hz)


@dataclass
class ImuIntrinsics:
    """Systematic-error parameters; identity/zero reproduces the calibrated model."""

    model: str = CALIBRATED
    M_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    M_g: np.ndarray = field(default_factory=lambda: np.eye(3))
    M_s: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        if self.model not in (CALIBRATED, SCALE_MISALIGNMENT):
            raise ValueError(f"unknown IMU model {self.model!r}")
        self.M_a = np.asarray(self.M_a, dtype=float)
        self.M_g = np.asarray(self.M_g, dtype=float)
        self.M_s = np.asarray(self.M_s, dtype=float)
        if self.model == CALIBRATED:
            if (not np.array_equal(self.M_a, np.eye(3))
                    or not np.array_equal(self.M_g, np.eye(3))
                    or not np.array_equal(self.M_s, np.zeros((3, 3)))):
                raise ValueError("calibrated model fixes M_a=I, M_g=I, M_s=0")
        if np.any(np.triu(self.M_a, 1) != 0):
            raise ValueError("M_a must be lower triangular")
        if np.any(np.diag(self.M_a) <= 0):
            raise ValueError("M_a diagonal must be positive")


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class GravityState:
    """Gravity as a fixed-magnitude direction in the target frame."""

    direction: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    magnitude: float = STANDARD_GRAVITY

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float).reshape(3)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"gravity direction must be unit, norm={norm}")

    @property
    def vector(self):
        return self.magnitude * self.direction


# Bias spline layout: rows 0-2 gyro bias, rows 3-5 accelerometer bias.
GYRO_BIAS = slice(0, 3)
ACCEL_BIAS = slice(3, 6)


def _check_domain(spline, t):
    t_arr = np.asarray(t, dtype=float)
    if not np.all(spline.contains(t_arr)):
        raise DomainError(f"time outside spline domain [{spline.t_min}, {spline.t_max}]")


def predicted_specific_force(pose_spline: PoseSplineView, gravity: GravityState, t):
    """Ideal accelerometer output R^T (p_ddot - g), batched over t."""
    _check_domain(pose_spline.spline, t)
    phi = pose_spline.angle_axis(t)
    p_ddot = pose_spline.translation(t, derivative=2)
    R = angle_axis_to_rotation(phi)
    return np.einsum("...ji,...j->...i", R, p_ddot - gravity.vector)


def predicted_angular_rate(pose_spline: PoseSplineView, t):
    """Body-frame angular velocity J_r(phi) phidot, batched over t."""
    _check_domain(pose_spline.spline, t)
    phi = pose_spline.angle_axis(t)
    phi_dot = pose_spline.angle_axis(t, derivative=1)
    return np.einsum("...ij,...j->...i", right_jacobian(phi), phi_dot)


def gyro_bias_at(bias_spline, t, derivative=0):
    return bias_spline.evaluate(t, derivative)[..., GYRO_BIAS]


def accel_bias_at(bias_spline, t, derivative=0):
    return bias_spline.evaluate(t, derivative)[..., ACCEL_BIAS]


def accel_residual(sample: ImuSample, pose_spline: PoseSplineView, bias_spline,
                   imu_intr: ImuIntrinsics, gravity: GravityState,
                   noise: ImuNoise):
    """Whitened accelerometer residual a_m - (M_a a_s + b_a)."""
    t = sample.timestamp
    _check_domain(bias_spline, t)
    a_s = predicted_specific_force(pose_spline, gravity, t)
    pred = imu_intr.M_a @ a_s + accel_bias_at(bias_spline, t)
    return (np.asarray(sample.accel, dtype=float) - pred) / noise.accel_sample_std


def gyro_residual(sample: ImuSample, pose_spline: PoseSplineView, bias_spline,
                  imu_intr: ImuIntrinsics, gravity: GravityState,
                  noise: ImuNoise):
    """Whitened gyroscope residual w_m - (M_g w + M_s a_s + b_g)."""
    t = sample.timestamp
    _check_domain(bias_spline, t)
    omega = predicted_angular_rate(pose_spline, t)
    pred = imu_intr.M_g @ omega + gyro_bias_at(bias_spline, t)
    if imu_intr.model == SCALE_MISALIGNMENT:
        pred = pred + imu_intr.M_s @ predicted_specific_force(pose_spline, gravity, t)
    return (np.asarray(sample.gyro, dtype=float) - pred) / noise.gyro_sample_std


def bias_prior_residual(bias_spline, t, noise: ImuNoise):
    """Whitened bias-derivative residual (b_a_dot/sigma_ba, b_g_dot/sigma_bg).

    The estimator samples this on a uniform grid scaled by sqrt(grid_dt) so
    the summed squares approximate the random-walk integral penalty.
    """
    _check_domain(bias_spline, t)
    d = bias_spline.evaluate(t, derivative=1)
    return np.concatenate([
        np.asarray(d[..., ACCEL_BIAS]) / noise.sigma_ba,
        np.asarray(d[..., GYRO_BIAS]) / noise.sigma_bg,
    ], axis=-1)
