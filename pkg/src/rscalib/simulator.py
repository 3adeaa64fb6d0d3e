"""Closed-loop simulator: target observations and IMU streams from a known
trajectory spline with known calibration parameters.

Rolling-shutter timing is solved per landmark: the exposure time of an
observation depends on its image row, which depends on the pose at that
time. The fixed point t = t_frame + t_IC + row_offset(v(t)) * d is contracted
by the small factor d * (rows of image motion per second), with an Aitken
extrapolation every third step to keep the iteration count low. Pixel noise
is added after the timing solve, so noise perturbs the measurement but not
the exposure geometry.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import camera as cam
from . import imu as imu_mod
from . import target as target_mod
from .errors import DegenerateGeometryError
from .geometry import (PoseSplineView, RigidTransform, angle_axis_to_rotation,
                       enforce_continuity, rotation_to_angle_axis)
from .imu import GravityState, ImuIntrinsics, ImuNoise
from .splines import fit_least_squares, grid_for_span


def default_intrinsics() -> cam.Intrinsics:
    """A 640x512 fisheye-ish camera with mild equidistant distortion."""
    return cam.Intrinsics(fu=380.0, fv=381.5, cu=318.2, cv=257.1,
                          k1=-0.012, k2=0.006, k3=-0.002, k4=0.0005,
                          width=640, height=512)


def default_extrinsics() -> RigidTransform:
    """Camera pose in the IMU frame for a typical rigid rig (axes flipped)."""
    base = np.array([[-1.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 0.0, -1.0]])
    wobble = angle_axis_to_rotation(np.array([0.02, -0.015, 0.03]))
    return RigidTransform(wobble @ base, np.array([-0.015, 0.061, -0.020]))


def default_target() -> target_mod.TargetSpec:
    return target_mod.TargetSpec(rows=6, cols=6, tag_size=0.088, spacing_ratio=0.3)


def default_imu_noise() -> ImuNoise:
    """ADIS16448-level densities at 200 Hz."""
    return ImuNoise(sigma_a=1.0e-2, sigma_ba=2.0e-4,
                    sigma_g=5.0e-3, sigma_bg=4.0e-6, rate_hz=200.0)


@dataclass
class SimulationSpec:
    duration: float = 50.0
    frame_rate_hz: float = 20.0
    imu_rate_hz: float = 200.0
    line_delay: float = 137.5e-6
    t_IC: float = 0.005
    T_CI: RigidTransform = field(default_factory=default_extrinsics)
    gravity: GravityState = field(default_factory=GravityState)
    imu_noise: ImuNoise = field(default_factory=default_imu_noise)
    imu_intrinsics: ImuIntrinsics = field(default_factory=ImuIntrinsics)
    sigma_c: float = 1.0
    target: target_mod.TargetSpec = field(default_factory=default_target)
    intrinsics: cam.Intrinsics = field(default_factory=default_intrinsics)
    trajectory: PoseSplineView = None
    rng_seed: int = 0
    timestamp_convention: str = cam.CENTRAL_ROW
    gyro_bias0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    freeze_biases: bool = False

    def __post_init__(self):
        if self.frame_rate_hz <= 0 or self.imu_rate_hz <= 0:
            raise ValueError("rates must be positive")
        if self.trajectory is None:
            self.trajectory = reference_trajectory(
                "figure8", self.duration, self.rng_seed,
                T_CI=self.T_CI, intrinsics=self.intrinsics, target=self.target)
        lo, hi = self.trajectory.t_min, self.trajectory.t_max
        if lo > 0.0 or hi < self.duration:
            raise ValueError("trajectory domain must cover the simulated span")

    @property
    def temporal(self) -> cam.CameraTemporal:
        return cam.CameraTemporal(t_IC=self.t_IC, line_delay=self.line_delay,
                                  timestamp_convention=self.timestamp_convention)


def _target_center(target):
    _, pts = target_mod.landmarks(target)
    return pts.mean(axis=0)


_LOOK_DOWN = np.array([[1.0, 0.0, 0.0],
                       [0.0, -1.0, 0.0],
                       [0.0, 0.0, -1.0]])


def reference_trajectory(kind: str, duration: float, seed: int = 0,
                         knot_rate_hz: float = 20.0,
                         T_CI: RigidTransform = None,
                         intrinsics: cam.Intrinsics = None,
                         target: target_mod.TargetSpec = None,
                         standoff: float = 1.2) -> PoseSplineView:
    """Ground-truth device trajectory as an order-6 spline.

    figure8: the camera orbits the target center with sinusoidal attitude
    (about 30 deg on each axis, incommensurate frequencies) while translating
    sinusoidally (0.5 m amplitude, 0.3-0.6 Hz) at a 1.2 m standoff; the orbit
    keeps the target framed so corners stay observable. random_smooth: a
    smoothing-spline fit through seeded random waypoints around the same
    nominal view. The returned spline is the exact truth; the generating
    sinusoids are discarded.
    """
    if duration < 10.0:
        raise ValueError("need at least 10 s of trajectory")
    T_CI = T_CI if T_CI is not None else default_extrinsics()
    intrinsics = intrinsics if intrinsics is not None else default_intrinsics()
    target = target if target is not None else default_target()
    center = _target_center(target)
    margin = 1.5
    grid = grid_for_span(-margin, duration + margin, knot_rate_hz, 6)

    if kind == "figure8":
        times = np.arange(grid.knot(0), grid.knot(grid.count - 1) + 1e-9, 0.01)
        times = times[(times >= grid.domain(6)[0]) & (times <= grid.domain(6)[1])]
        two_pi = 2.0 * np.pi
        tilt = np.stack([
            0.50 * np.sin(two_pi * 0.36 * times),
            0.52 * np.sin(two_pi * 0.47 * times),
            0.45 * np.sin(two_pi * 0.73 * times),
        ], axis=1)
        offset = np.stack([
            0.50 * np.sin(two_pi * 0.37 * times),
            0.50 * np.sin(two_pi * 0.53 * times),
            standoff + 0.15 * np.sin(two_pi * 0.29 * times),
        ], axis=1)
        R_orb = angle_axis_to_rotation(tilt)
        R_WC = R_orb @ _LOOK_DOWN
        p_WC = center + np.einsum("nij,nj->ni", R_orb, offset)
        smoothing = 1e-8
    elif kind == "random_smooth":
        rng = np.random.default_rng(seed)
        times = np.arange(grid.knot(0), grid.knot(grid.count - 1) + 0.8, 0.8)
        times = np.clip(times, *grid.domain(6))
        n = times.shape[0]
        tilt = rng.uniform(-0.45, 0.45, size=(n, 3))
        offset = np.stack([
            rng.uniform(-0.45, 0.45, n),
            rng.uniform(-0.45, 0.45, n),
            standoff + rng.uniform(-0.15, 0.15, n),
        ], axis=1)
        R_orb = angle_axis_to_rotation(tilt)
        R_WC = R_orb @ _LOOK_DOWN
        p_WC = center + np.einsum("nij,nj->ni", R_orb, offset)
        smoothing = 3e-3
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")

    R_WI = R_WC @ T_CI.rotation
    p_WI = np.einsum("nij,j->ni", R_WC, T_CI.translation) + p_WC
    phis = enforce_continuity([rotation_to_angle_axis(R) for R in R_WI])
    samples = np.hstack([np.asarray(phis), p_WI])
    spline = fit_least_squares(times, samples, 6, grid, smoothing_weight=smoothing)
    view = PoseSplineView(spline)

    pose0 = view.pose_at(0.0)
    cam_pose0 = pose0.compose(T_CI.inverse())  # T_WC at t = 0
    _, pts = target_mod.landmarks(target)
    in_cam = cam_pose0.inverse().apply(pts)
    if np.any(in_cam[:, 2] <= 0):
        raise DegenerateGeometryError("target behind camera at t=0")
    uv = cam.project(intrinsics, in_cam)
    inside = ((uv[:, 0] >= 0) & (uv[:, 0] < intrinsics.width)
              & (uv[:, 1] >= 0) & (uv[:, 1] < intrinsics.height))
    if not np.all(inside):
        raise DegenerateGeometryError("target not fully visible at t=0")
    return view


def simulate_observations(spec: SimulationSpec):
    """Noisy rolling-shutter corner observations.

    Returns (frame_ids, frame_times, landmark_ids, pixels, true_times) with
    one entry per kept observation. Landmarks that project out of bounds,
    behind the camera, or whose timing iteration fails are skipped; the
    skip counts are available on the returned table as attributes.
    """
    target_ids, pts_W = target_mod.landmarks(spec.target)
    n_land = pts_W.shape[0]
    n_frames = int(np.floor(spec.duration * spec.frame_rate_hz))
    frame_times = np.arange(n_frames) / spec.frame_rate_hz
    intr = spec.intrinsics
    temporal = spec.temporal
    traj = spec.trajectory
    T_IC = spec.T_CI.inverse()

    frame_idx = np.repeat(np.arange(n_frames), n_land)
    land_idx = np.tile(np.arange(n_land), n_frames)
    t_f = frame_times[frame_idx]
    l_W = pts_W[land_idx]

    t = t_f + spec.t_IC  # start at the zero-row-offset time
    lo, hi = traj.t_min, traj.t_max
    alive = np.ones(t.shape[0], dtype=bool)
    uv = np.zeros((t.shape[0], 2))
    prev_step = None
    converged = np.zeros(t.shape[0], dtype=bool)
    for it in range(25):
        t_cl = np.clip(t, lo, hi)
        state = traj.spline.evaluate(t_cl)
        R = angle_axis_to_rotation(state[:, 0:3])
        x_I = np.einsum("nji,nj->ni", R, l_W - state[:, 3:6])
        x_C = x_I @ spec.T_CI.rotation.T + spec.T_CI.translation
        good = alive & (x_C[:, 2] > 1e-6)
        alive &= good
        z = np.where(x_C[:, 2] > 1e-6, x_C[:, 2], 1.0)
        r = np.hypot(x_C[:, 0], x_C[:, 1])
        theta_d = cam._distort_theta(np.arctan2(r, z), intr.distortion)
        scale = np.where(r > 1e-12, theta_d / np.where(r > 1e-12, r, 1.0), 1.0 / z)
        uv[:, 0] = intr.fu * scale * x_C[:, 0] + intr.cu
        uv[:, 1] = intr.fv * scale * x_C[:, 1] + intr.cv
        row = np.clip(uv[:, 1], -intr.height, 2.0 * intr.height)
        t_new = t_f + spec.t_IC + cam.row_offset(temporal, row, intr.height) \
            * spec.line_delay
        step = t_new - t
        done = np.abs(step) < 1e-9
        converged |= done & alive
        if prev_step is not None and it % 3 == 2:
            # Aitken extrapolation from the last two steps
            denom = prev_step - step
            safe = np.abs(denom) > 1e-18
            accel = np.where(safe & ~done, step * step / np.where(safe, denom, 1.0), 0.0)
            t = np.where(alive & ~done, t_new + accel, np.where(done, t, t_new))
        else:
            t = np.where(alive & ~done, t_new, t)
        prev_step = step
        if np.all(done | ~alive):
            break
    alive &= converged
    alive &= (t >= lo) & (t <= hi)
    alive &= ((uv[:, 0] >= 0) & (uv[:, 0] < intr.width)
              & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height))

    # per-frame noise substreams keep results stable under any frame-level
    # parallel split
    noisy = uv.copy()
    if spec.sigma_c > 0:
        for f in range(n_frames):
            sel = slice(f * n_land, (f + 1) * n_land)
            rng = np.random.default_rng([spec.rng_seed, 1, f])
            noisy[sel] = uv[sel] + spec.sigma_c * rng.standard_normal((n_land, 2))
    alive &= ((noisy[:, 0] >= 0) & (noisy[:, 0] < intr.width)
              & (noisy[:, 1] >= 0) & (noisy[:, 1] < intr.height))

    keep = np.flatnonzero(alive)
    return ObservationSet(
        frame_ids=frame_idx[keep],
        frame_times=t_f[keep],
        landmark_ids=target_ids[land_idx[keep]],
        pixels=noisy[keep],
        true_times=t[keep],
        num_skipped=int(t.shape[0] - keep.shape[0]),
    )


@dataclass
class ObservationSet:
    """Columnar observation table (one row per kept corner observation)."""

    frame_ids: np.ndarray
    frame_times: np.ndarray
    landmark_ids: np.ndarray
    pixels: np.ndarray
    true_times: np.ndarray = None
    num_skipped: int = 0

    def __len__(self):
        return self.frame_ids.shape[0]


@dataclass
class ImuStream:
    times: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __len__(self):
        return self.times.shape[0]


def simulate_imu(spec: SimulationSpec) -> ImuStream:
    """IMU samples with white noise and random-walk biases, seeded."""
    rate = spec.imu_rate_hz
    n = int(np.floor(spec.duration * rate)) + 1
    times = np.arange(n) / rate
    traj = spec.trajectory
    a_s = imu_mod.predicted_specific_force(traj, spec.gravity, times)
    omega = imu_mod.predicted_angular_rate(traj, times)

    rng = np.random.default_rng([spec.rng_seed, 2])
    dt = 1.0 / rate
    noise = spec.imu_noise
    if spec.freeze_biases:
        b_g = np.broadcast_to(spec.gyro_bias0, (n, 3))
        b_a = np.broadcast_to(spec.accel_bias0, (n, 3))
    else:
        steps_g = noise.sigma_bg * np.sqrt(dt) * rng.standard_normal((n, 3))
        steps_a = noise.sigma_ba * np.sqrt(dt) * rng.standard_normal((n, 3))
        b_g = spec.gyro_bias0 + np.cumsum(steps_g, axis=0) - steps_g[0]
        b_a = spec.accel_bias0 + np.cumsum(steps_a, axis=0) - steps_a[0]

    mi = spec.imu_intrinsics
    gyro = omega @ mi.M_g.T + a_s @ mi.M_s.T + b_g \
        + noise.gyro_sample_std * rng.standard_normal((n, 3))
    accel = a_s @ mi.M_a.T + b_a \
        + noise.accel_sample_std * rng.standard_normal((n, 3))
    return ImuStream(times=times, gyro=gyro, accel=accel)


def ground_truth(spec: SimulationSpec) -> dict:
    """Reference parameter bundle matching the calibration report schema."""
    return {
        "T_CI": spec.T_CI,
        "t_IC": spec.t_IC,
        "line_delay": spec.line_delay,
        "gravity_direction": spec.gravity.direction.copy(),
        "gravity_magnitude": spec.gravity.magnitude,
        "imu_model": spec.imu_intrinsics.model,
        "M_a": spec.imu_intrinsics.M_a.copy(),
        "M_g": spec.imu_intrinsics.M_g.copy(),
        "M_s": spec.imu_intrinsics.M_s.copy(),
        "imu_noise": spec.imu_noise,
        "sigma_c": spec.sigma_c,
        "rng_seed": spec.rng_seed,
        "timestamp_convention": spec.timestamp_convention,
    }
