"""Trajectory and time-offset initialization ahead of the batch solve.

Per-frame camera poses come from planar-target PnP: a DLT homography on
undistorted normalized coordinates, decomposed into rotation and translation,
then refined by a few Gauss-Newton steps on the full reprojection error.
The camera time offset is initialized by cross-correlating the gyroscope
magnitude against the angular-rate magnitude of the camera-derived
trajectory.
"""

from dataclasses import dataclass

import numpy as np

from . import camera as cam
from .errors import DegenerateGeometryError, InsufficientDataError
from .geometry import (PoseSplineView, RigidTransform, angle_axis_to_rotation,
                       enforce_continuity, rotation_to_angle_axis, skew)
from .imu import predicted_angular_rate
from .splines import fit_least_squares, grid_for_span

MIN_PNP_LANDMARKS = 4
MIN_USABLE_FRAMES = 20
PNP_RMS_LIMIT_PX = 5.0


def _normalize_2d(pts):
    mean = pts.mean(axis=0)
    centered = pts - mean
    scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(centered, axis=1)), 1e-12)
    T = np.array([[scale, 0.0, -scale * mean[0]],
                  [0.0, scale, -scale * mean[1]],
                  [0.0, 0.0, 1.0]])
    return centered * scale, T


def homography_dlt(src, dst):
    """Plane-to-plane homography with Hartley normalization; dst ~ H src."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape[0] < 4:
        raise DegenerateGeometryError("homography needs at least 4 points")
    sn, Ts = _normalize_2d(src)
    dn, Td = _normalize_2d(dst)
    n = src.shape[0]
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = sn
    A[0::2, 2] = 1.0
    A[0::2, 6:8] = -dn[:, [0]] * sn
    A[0::2, 8] = -dn[:, 0]
    A[1::2, 3:5] = sn
    A[1::2, 5] = 1.0
    A[1::2, 6:8] = -dn[:, [1]] * sn
    A[1::2, 8] = -dn[:, 1]
    _, sv, vt = np.linalg.svd(A, full_matrices=False)
    if sv[-2] < 1e-9 * sv[0]:
        raise DegenerateGeometryError("homography system rank deficient")
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ H @ Ts
    return H / H[2, 2]


def pose_from_homography(H):
    """World(z=0)-to-camera pose from a normalized-coordinates homography."""
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1, r2, t = lam * h1, lam * h2, lam * h3
    if t[2] < 0:  # plane must be in front of the camera
        r1, r2, t = -r1, -r2, -t
    r3 = np.cross(r1, r2)
    approx = np.column_stack([r1, r2, r3])
    u, _, vt = np.linalg.svd(approx)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, 2] = -u[:, 2]
        R = u @ vt
    return RigidTransform(R, t)


def refine_pnp(T_CW: RigidTransform, points_W, pixels, intr, iterations=10):
    """Gauss-Newton refinement of a single camera pose on reprojection."""
    R = T_CW.rotation.copy()
    t = T_CW.translation.copy()
    points_W = np.asarray(points_W, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    for _ in range(iterations):
        x_C = points_W @ R.T + t
        if np.any(x_C[:, 2] <= 1e-6):
            break
        res = (cam.project(intr, x_C) - pixels).ravel()
        Jp = cam.project_jacobian(intr, x_C)
        J = np.empty((points_W.shape[0], 2, 6))
        J[:, :, 0:3] = -Jp @ skew(x_C - t)
        J[:, :, 3:6] = Jp
        J = J.reshape(-1, 6)
        JtJ = J.T @ J + 1e-12 * np.eye(6)
        step = np.linalg.solve(JtJ, -J.T @ res)
        R = angle_axis_to_rotation(step[0:3]) @ R
        t = t + step[3:6]
        if np.linalg.norm(step) < 1e-14:
            break
    return RigidTransform(R, t)


def solve_frame_pnp(points_W, pixels, intr):
    """Camera pose from one frame of a planar target; returns (pose, rms)."""
    points_W = np.asarray(points_W, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    if points_W.shape[0] < MIN_PNP_LANDMARKS:
        raise DegenerateGeometryError("too few landmarks for PnP")
    planar = points_W[:, 0:2]
    spread = planar - planar.mean(axis=0)
    sv = np.linalg.svd(spread, compute_uv=False)
    if sv[1] < 1e-6 * max(sv[0], 1e-12):
        raise DegenerateGeometryError("landmarks nearly collinear")
    bearings = cam.unproject(intr, pixels)
    normalized = bearings[:, 0:2] / bearings[:, [2]]
    H = homography_dlt(planar, normalized)
    pose = pose_from_homography(H)
    pose = refine_pnp(pose, points_W, pixels, intr)
    x_C = points_W @ pose.rotation.T + pose.translation
    rms = float(np.sqrt(np.mean(np.sum(
        (cam.project(intr, x_C) - pixels) ** 2, axis=1))))
    return pose, rms


@dataclass
class TrajectoryInit:
    view: PoseSplineView
    frame_times: np.ndarray    # camera clock, usable frames only
    poses_WI: list             # per usable frame, device pose in target frame
    skipped_frames: int


def initialize_trajectory(observations, intrinsics, landmark_points, config,
                          T_CI_init: RigidTransform) -> TrajectoryInit:
    """Per-frame PnP poses fitted by a smoothed pose spline.

    ``observations`` is a columnar ObservationSet; ``landmark_points`` an
    (num_ids, 3) array indexed by landmark id. Frames with fewer than 4
    landmarks, degenerate geometry, or refined RMS above 5 px are skipped.
    """
    order = config.spline_order
    frame_ids = observations.frame_ids
    uniq, starts = np.unique(frame_ids, return_index=True)
    ends = np.append(starts[1:], frame_ids.shape[0])
    times, poses_CW = [], []
    skipped = 0
    for fid, s, e in zip(uniq, starts, ends):
        pts = landmark_points[observations.landmark_ids[s:e]]
        px = observations.pixels[s:e]
        try:
            pose, rms = solve_frame_pnp(pts, px, intrinsics)
        except DegenerateGeometryError:
            skipped += 1
            continue
        if rms > PNP_RMS_LIMIT_PX or not np.all(np.isfinite(pose.translation)):
            skipped += 1
            continue
        times.append(float(observations.frame_times[s]))
        poses_CW.append(pose)
    if len(times) < MIN_USABLE_FRAMES:
        raise InsufficientDataError(
            f"only {len(times)} usable frames after PnP, need {MIN_USABLE_FRAMES}")

    poses_WI = [p.inverse().compose(T_CI_init) for p in poses_CW]
    times = np.asarray(times)
    view = fit_pose_spline(times, poses_WI, order, config.pose_knot_rate_hz)
    return TrajectoryInit(view=view, frame_times=times, poses_WI=poses_WI,
                          skipped_frames=skipped)


def fit_pose_spline(times, poses_WI, order, knot_rate_hz,
                    smoothing_weight=1e-6) -> PoseSplineView:
    """Fit a pose spline through timestamped rigid transforms."""
    phis = enforce_continuity([rotation_to_angle_axis(p.rotation) for p in poses_WI])
    samples = np.hstack([np.asarray(phis),
                         np.asarray([p.translation for p in poses_WI])])
    grid = grid_for_span(times[0], times[-1], knot_rate_hz, order)
    spline = fit_least_squares(times, samples, order, grid,
                               smoothing_weight=smoothing_weight)
    return PoseSplineView(spline)


def initialize_time_offset(observations, imu_stream, trajectory,
                           search_window: float = 0.2, baseline_frames: int = 2,
                           trim_fraction: float = 0.3):
    """Camera-to-IMU clock offset by aligning rotation against the gyroscope.

    The camera-derived trajectory is indexed by the camera clock, the
    gyroscope by the IMU clock; an event at camera time t shows up in the
    gyro at t + t_IC, so the lag best aligning the two estimates t_IC.
    Instantaneous rates are too noisy at millisecond resolution, so both
    sides are integrated over a short frame baseline: the camera side is the
    relative rotation vector across ``baseline_frames`` frames, the gyro side
    the integral of the rate over the same lag-shifted window (with the
    second-order non-commutativity correction). The largest-rotation windows
    are trimmed since rolling-shutter distortion of the per-frame poses grows
    with rate. A coarse scan over +-search_window is refined on a 0.1 ms grid
    with a final parabolic interpolation.

    ``trajectory`` is a TrajectoryInit (per-frame poses are used directly) or
    a PoseSplineView (poses sampled at the frame times). Returns
    (t_IC, warning); on a degenerate signal the offset falls back to 0.
    """
    if isinstance(trajectory, TrajectoryInit):
        frame_times = trajectory.frame_times
        rotations = [p.rotation for p in trajectory.poses_WI]
    else:
        frame_times = np.unique(np.asarray(observations.frame_times, dtype=float))
        frame_times = frame_times[(frame_times >= trajectory.t_min)
                                  & (frame_times <= trajectory.t_max)]
        rotations = [angle_axis_to_rotation(trajectory.angle_axis(t))
                     for t in frame_times]
    if frame_times.shape[0] < 3 \
            or (imu_stream.times[-1] - imu_stream.times[0]) < 5.0 \
            or (frame_times[-1] - frame_times[0]) < 5.0:
        raise InsufficientDataError("need at least 5 s of overlapping motion")

    k = baseline_frames
    nominal = np.median(np.diff(frame_times))
    rel, t0s, t1s = [], [], []
    for i in range(len(frame_times) - k):
        if frame_times[i + k] - frame_times[i] > 1.5 * k * nominal:
            continue
        rel.append(rotation_to_angle_axis(rotations[i].T @ rotations[i + k]))
        t0s.append(frame_times[i])
        t1s.append(frame_times[i + k])
    rel = np.asarray(rel)
    t0s, t1s = np.asarray(t0s), np.asarray(t1s)
    if rel.shape[0] < 10:
        raise InsufficientDataError("too few frame pairs for time alignment")
    if np.std(np.linalg.norm(rel, axis=1) / (t1s - t0s)) < 1e-3:
        return 0.0, "trajectory shows no rotation; time offset unobservable"

    # cumulative integrals of omega and of (int omega) x omega for the
    # window integral and its second-order correction
    w = imu_stream.gyro
    dts = np.diff(imu_stream.times)[:, None]
    C1 = np.concatenate([np.zeros((1, 3)),
                         np.cumsum(0.5 * (w[1:] + w[:-1]) * dts, axis=0)])
    cxw = np.cross(C1, w)
    C2 = np.concatenate([np.zeros((1, 3)),
                         np.cumsum(0.5 * (cxw[1:] + cxw[:-1]) * dts, axis=0)])

    def interp3(ts, C):
        return np.stack([np.interp(ts, imu_stream.times, C[:, a])
                         for a in range(3)], axis=1)

    def gyro_rotvec(lag):
        c1a, c1b = interp3(t0s + lag, C1), interp3(t1s + lag, C1)
        d1 = c1b - c1a
        d2 = interp3(t1s + lag, C2) - interp3(t0s + lag, C2)
        return d1 + 0.5 * (d2 - np.cross(c1a, d1))

    mag = np.linalg.norm(rel, axis=1)
    keep = mag <= np.quantile(mag, 1.0 - trim_fraction)

    def sse(lag):
        d = (rel - gyro_rotvec(lag))[keep].ravel()
        return float(d @ d)

    coarse = np.arange(-search_window, search_window + 1e-12, 2e-3)
    best = coarse[int(np.argmin([sse(lag) for lag in coarse]))]
    fine = np.arange(best - 2.5e-3, best + 2.5e-3 + 1e-12, 1e-4)
    costs = np.array([sse(lag) for lag in fine])
    i = int(np.argmin(costs))
    offset = fine[i]
    if 0 < i < len(fine) - 1:
        a, b, c = costs[i - 1], costs[i], costs[i + 1]
        denom = a - 2.0 * b + c
        if abs(denom) > 1e-18:
            offset = fine[i] + np.clip(0.5 * (a - c) / denom, -1.0, 1.0) * 1e-4

    g = gyro_rotvec(offset)[keep].ravel()
    r = rel[keep].ravel()
    rc, gc = r - r.mean(), g - g.mean()
    denom = np.linalg.norm(rc) * np.linalg.norm(gc)
    corr = float(rc @ gc / denom) if denom > 0 else 0.0
    if corr < 0.2:
        return 0.0, "gyro / trajectory correlation too flat to estimate offset"
    return float(offset), None
