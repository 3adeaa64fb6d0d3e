"""Batch calibration: problem assembly and the damped Gauss-Newton solve.

The state couples two vector splines (pose and IMU bias) with a handful of
global parameters: the camera-to-IMU transform, the camera clock offset, the
rolling-shutter line delay, the gravity direction (2 DOF on the sphere), and
optionally the IMU scale/misalignment matrices. All residuals are whitened;
Jacobians are analytic throughout, including the chain rule through the
observation time (the clock offset and line delay move each observation
along the trajectory, so their columns couple to the spline time
derivative). Spline locality keeps the normal equations block banded with a
dense arrow for the global parameters; scipy sparse handles the rest.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import camera as cam
from .errors import (EmptyProblemError, InsufficientDataError,
                     NumericalFailureError)
from .geometry import (PoseSplineView, RigidTransform, angle_axis_to_rotation,
                       enforce_continuity, extrinsic_error, right_jacobian,
                       right_jacobian_product_derivative, rotation_to_angle_axis,
                       skew)
from .imu import (ACCEL_BIAS, CALIBRATED, GYRO_BIAS, SCALE_MISALIGNMENT,
                  STANDARD_GRAVITY, GravityState, ImuIntrinsics, ImuNoise)
from .initialization import initialize_time_offset, initialize_trajectory
from .splines import (VectorSpline, evaluation_weights, fit_least_squares,
                      grid_for_span)

DEFAULT_LINE_DELAY_INIT = 30e-6      # mid consumer-camera range
LINE_DELAY_BOUNDS = (0.0, 500e-6)
MIN_ACCEL_SCALE = 1e-3


@dataclass
class CalibrationConfig:
    spline_order: int = 6
    pose_knot_rate_hz: float = 100.0
    bias_knot_rate_hz: float = 50.0
    imu_model: str = CALIBRATED
    sigma_c: float = 1.0
    max_iterations: int = 50
    function_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-12
    estimate_line_delay: bool = True
    estimate_time_offset: bool = True
    timestamp_convention: str = cam.FIRST_ROW
    huber: bool = False                 # optional robust loss, width 2 sigma_c
    gravity_magnitude: float = STANDARD_GRAVITY
    initial_line_delay: float = None    # None -> 30 us unless specs given
    initial_time_offset: float = None   # None -> cross-correlation
    domain_margin: float = 0.010        # slack around the observation span

    def __post_init__(self):
        if self.spline_order < 4:
            raise ValueError("need spline order >= 4 for C2 accelerations")
        if self.pose_knot_rate_hz <= 0 or self.bias_knot_rate_hz <= 0:
            raise ValueError("knot rates must be positive")
        if self.imu_model not in (CALIBRATED, SCALE_MISALIGNMENT):
            raise ValueError(f"unknown IMU model {self.imu_model!r}")
        if self.sigma_c <= 0:
            raise ValueError("sigma_c must be positive")

    @classmethod
    def desk_scale(cls, **overrides):
        """Lower knot rates for desk-scale runs (pose 20 Hz, bias 5 Hz)."""
        kw = dict(pose_knot_rate_hz=20.0, bias_knot_rate_hz=5.0)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class ParameterBlock:
    """Everything the solver estimates; known parameters stay outside."""

    pose_spline: VectorSpline
    bias_spline: VectorSpline
    T_CI: RigidTransform
    t_IC: float
    line_delay: float
    gravity: GravityState
    imu_intrinsics: ImuIntrinsics

    def copy(self):
        return ParameterBlock(
            pose_spline=self.pose_spline.with_control_points(
                self.pose_spline.control_points.copy()),
            bias_spline=self.bias_spline.with_control_points(
                self.bias_spline.control_points.copy()),
            T_CI=RigidTransform(self.T_CI.rotation.copy(),
                                self.T_CI.translation.copy()),
            t_IC=self.t_IC,
            line_delay=self.line_delay,
            gravity=GravityState(self.gravity.direction.copy(),
                                 self.gravity.magnitude),
            imu_intrinsics=ImuIntrinsics(
                model=self.imu_intrinsics.model,
                M_a=self.imu_intrinsics.M_a.copy(),
                M_g=self.imu_intrinsics.M_g.copy(),
                M_s=self.imu_intrinsics.M_s.copy()),
        )

    @property
    def pose_view(self):
        return PoseSplineView(self.pose_spline)


def gravity_tangent_basis(direction):
    """Deterministic 3x2 basis of the plane orthogonal to the direction."""
    n = np.asarray(direction, dtype=float)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(n)))] = 1.0
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return np.column_stack([e1, e2])


class DofLayout:
    """Column bookkeeping for the stacked Jacobian."""

    def __init__(self, n_pose_cps, n_bias_cps, estimate_t, estimate_d,
                 scale_misalign):
        self.pose = 0
        self.bias = 6 * n_pose_cps
        self.extrinsic = self.bias + 6 * n_bias_cps
        off = self.extrinsic + 6
        self.t_IC = off if estimate_t else None
        off += 1 if estimate_t else 0
        self.line_delay = off if estimate_d else None
        off += 1 if estimate_d else 0
        self.gravity = off
        off += 2
        self.imu_matrices = off if scale_misalign else None
        off += 24 if scale_misalign else 0
        self.total = off
        self.n_pose_cps = n_pose_cps
        self.n_bias_cps = n_bias_cps


# lower-triangular free entries of M_a, row-major
_MA_ENTRIES = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]


class _JacobianBuilder:
    def __init__(self):
        self._data, self._rows, self._cols = [], [], []

    def add(self, row0, block, cols):
        """block: (n, r, c) dense entries; cols: (n, c) or (c,) column ids;
        row0: (n,) first row of each item."""
        n, r, c = block.shape
        rows = (row0[:, None, None] + np.arange(r)[None, :, None])
        rows = np.broadcast_to(rows, block.shape)
        cols = np.asarray(cols)
        if cols.ndim == 1:
            cols = np.broadcast_to(cols[None, None, :], block.shape)
        else:
            cols = np.broadcast_to(cols[:, None, :], block.shape)
        self._data.append(block.ravel())
        self._rows.append(rows.ravel().astype(np.int32))
        self._cols.append(cols.ravel().astype(np.int32))

    def build(self, n_rows, n_cols):
        data = np.concatenate(self._data)
        rows = np.concatenate(self._rows)
        cols = np.concatenate(self._cols)
        return sparse.csr_matrix((data, (rows, cols)), shape=(n_rows, n_cols))


class CalibrationProblem:
    """Assembled residual set over fixed data with a movable parameter state.

    Residual layout (deterministic): reprojection rows (2 per observation in
    input order), accelerometer rows (3 per kept IMU sample), gyroscope rows
    (3 per kept sample), bias-prior rows (6 per bias-grid point).
    """

    def __init__(self, observations, imu_stream, config: CalibrationConfig,
                 initial: ParameterBlock, landmark_points, intrinsics):
        self.config = config
        self.intrinsics = intrinsics
        self.noise = None  # set by assemble()
        self.state = initial

        n_obs = len(observations.frame_ids)
        if n_obs == 0:
            raise EmptyProblemError("no observations")
        self.obs_tf = np.asarray(observations.frame_times, dtype=float)
        self.obs_uv = np.asarray(observations.pixels, dtype=float)
        self.obs_l_W = np.asarray(landmark_points, dtype=float)[
            np.asarray(observations.landmark_ids, dtype=int)]
        temporal = cam.CameraTemporal(
            t_IC=0.0, line_delay=0.0,
            timestamp_convention=config.timestamp_convention)
        self.row_eff = np.asarray(cam.row_offset(
            temporal, self.obs_uv[:, 1], intrinsics.height))

        pose = initial.pose_spline
        bias = initial.bias_spline
        lo = max(pose.t_min, bias.t_min)
        hi = min(pose.t_max, bias.t_max)
        t_imu = np.asarray(imu_stream.times, dtype=float)
        keep = (t_imu >= lo) & (t_imu <= hi)
        self.imu_t = t_imu[keep]
        self.imu_gyro = np.asarray(imu_stream.gyro, dtype=float)[keep]
        self.imu_accel = np.asarray(imu_stream.accel, dtype=float)[keep]
        self.dropped_imu_samples = int(np.count_nonzero(~keep))
        if self.imu_t.shape[0] == 0:
            raise EmptyProblemError("no IMU samples inside the spline domain")

        # bias prior grid: bias-segment midpoints inside the common domain
        bg = bias.knots
        k_b = bias.order
        mids = bg.knot(k_b - 1) + (np.arange(bg.count - 2 * k_b + 1) + 0.5) * bg.dt
        self.prior_t = mids[(mids >= lo) & (mids <= hi)]
        self.prior_dt = bg.dt

        self.layout = DofLayout(
            pose.num_control_points, bias.num_control_points,
            estimate_t=config.estimate_time_offset,
            estimate_d=config.estimate_line_delay,
            scale_misalign=(config.imu_model == SCALE_MISALIGNMENT))

        self.n_obs = n_obs
        self.n_imu = self.imu_t.shape[0]
        self.n_prior = self.prior_t.shape[0]
        self.num_rows = 2 * n_obs + 6 * self.n_imu + 6 * self.n_prior
        self.dropped_reprojection = 0
        self.dropped_behind_camera = 0

    # ---------------------------------------------------------------- spline

    def _gather(self, spline, t, derivatives):
        k = spline.order
        base, w0 = evaluation_weights(spline.knots, k, t, 0)
        out = {0: w0}
        for r in derivatives:
            if r:
                _, out[r] = evaluation_weights(spline.knots, k, t, r)
        idx = base[:, None] + np.arange(k)
        return idx, spline.control_points[idx], out

    # ---------------------------------------------------- reprojection block

    def _reprojection(self, st: ParameterBlock, want_jac: bool):
        cfg = self.config
        intr = self.intrinsics
        pose = st.pose_spline
        t_obs = self.obs_tf + st.t_IC + self.row_eff * st.line_delay
        lo, hi = pose.t_min, pose.t_max
        inside = (t_obs >= lo) & (t_obs <= hi)
        t_ev = np.clip(t_obs, lo, hi)

        idx, cps, w = self._gather(pose, t_ev, (0, 1) if want_jac else (0,))
        phi = np.einsum("nk,nkd->nd", w[0], cps[:, :, 0:3])
        p = np.einsum("nk,nkd->nd", w[0], cps[:, :, 3:6])
        R = angle_axis_to_rotation(phi)
        x_I = np.einsum("nji,nj->ni", R, self.obs_l_W - p)
        x_C = x_I @ st.T_CI.rotation.T + st.T_CI.translation
        front = x_C[:, 2] > 1e-6
        valid = inside & front

        uv = cam.project_unchecked(intr, x_C)
        res = (uv - self.obs_uv) / cfg.sigma_c
        res[~valid] = 0.0

        scale = None
        if cfg.huber:
            # IRLS weights for a Huber loss of width 2 sigma_c (whitened: 2)
            norm = np.linalg.norm(res, axis=1)
            scale = np.where(norm > 2.0, np.sqrt(2.0 / np.maximum(norm, 1e-12)), 1.0)
            res *= scale[:, None]

        counters = (int(np.count_nonzero(~inside)),
                    int(np.count_nonzero(inside & ~front)))
        if not want_jac:
            return res, counters

        Jp = cam.project_jacobian(intr, np.where(front[:, None], x_C,
                                                 np.array([0.0, 0.0, 1.0])))
        Jp = Jp / cfg.sigma_c
        if scale is not None:
            Jp = Jp * scale[:, None, None]
        Jp[~valid] = 0.0
        A = np.einsum("nij,jk->nik", Jp, st.T_CI.rotation)

        Jr = right_jacobian(phi)
        B_phi = A @ (skew(x_I) @ Jr)
        B_p = -np.einsum("nij,nkj->nik", A, R)      # A @ (-R^T)
        n = self.n_obs
        k = pose.order
        J_cp = np.empty((n, 2, k, 6))
        J_cp[:, :, :, 0:3] = B_phi[:, :, None, :] * w[0][:, None, :, None]
        J_cp[:, :, :, 3:6] = B_p[:, :, None, :] * w[0][:, None, :, None]

        J_T = np.empty((n, 2, 6))
        J_T[:, :, 0:3] = -np.einsum("nij,njk->nik", Jp, skew(x_C - st.T_CI.translation))
        J_T[:, :, 3:6] = Jp

        phi_dot = np.einsum("nk,nkd->nd", w[1], cps[:, :, 0:3])
        p_dot = np.einsum("nk,nkd->nd", w[1], cps[:, :, 3:6])
        omega = np.einsum("nij,nj->ni", Jr, phi_dot)
        dxI_dt = -np.cross(omega, x_I) - np.einsum("nji,nj->ni", R, p_dot)
        dr_dt = np.einsum("nij,nj->ni", A, dxI_dt)

        return res, counters, idx, J_cp, J_T, dr_dt

    # ------------------------------------------------------------- IMU block

    def _imu(self, st: ParameterBlock, want_jac: bool):
        pose = st.pose_spline
        bias = st.bias_spline
        noise = self.noise
        mi = st.imu_intrinsics
        sm = mi.model == SCALE_MISALIGNMENT
        t = self.imu_t

        pidx, pcps, pw = self._gather(pose, t, (0, 1, 2))
        bidx, bcps, bw = self._gather(bias, t, (0,))
        phi = np.einsum("nk,nkd->nd", pw[0], pcps[:, :, 0:3])
        p_ddot = np.einsum("nk,nkd->nd", pw[2], pcps[:, :, 3:6])
        phi_dot = np.einsum("nk,nkd->nd", pw[1], pcps[:, :, 0:3])
        b = np.einsum("nk,nkd->nd", bw[0], bcps)
        b_g, b_a = b[:, GYRO_BIAS], b[:, ACCEL_BIAS]

        R = angle_axis_to_rotation(phi)
        g_vec = st.gravity.vector
        a_s = np.einsum("nji,nj->ni", R, p_ddot - g_vec)
        Jr = right_jacobian(phi)
        omega = np.einsum("nij,nj->ni", Jr, phi_dot)

        s_a = noise.accel_sample_std
        s_g = noise.gyro_sample_std
        res_a = (self.imu_accel - (a_s @ mi.M_a.T + b_a)) / s_a
        pred_g = omega @ mi.M_g.T + b_g
        if sm:
            pred_g = pred_g + a_s @ mi.M_s.T
        res_g = (self.imu_gyro - pred_g) / s_g
        if not want_jac:
            return res_a, res_g

        das_dphi = skew(a_s) @ Jr                     # (n,3,3)
        Rt = np.swapaxes(R, -1, -2)
        E = gravity_tangent_basis(st.gravity.direction)
        das_dgrav = st.gravity.magnitude * np.einsum(
            "nij,jk->nik", Rt, skew(st.gravity.direction) @ E)  # (n,3,2)

        n = self.n_imu
        k_p = pose.order
        k_b = bias.order

        # accel rows: r = (a_m - M_a a_s - b_a)/s_a
        Ma_das = np.einsum("ij,njk->nik", mi.M_a, das_dphi)
        Ma_Rt = np.einsum("ij,njk->nik", mi.M_a, Rt)
        Ja_cp = np.empty((n, 3, k_p, 6))
        Ja_cp[:, :, :, 0:3] = -Ma_das[:, :, None, :] * pw[0][:, None, :, None] / s_a
        Ja_cp[:, :, :, 3:6] = -Ma_Rt[:, :, None, :] * pw[2][:, None, :, None] / s_a
        Ja_grav = -np.einsum("ij,njk->nik", mi.M_a, das_dgrav) / s_a

        # gyro rows: r = (w_m - M_g w - M_s a_s - b_g)/s_g
        dw_dphi = right_jacobian_product_derivative(phi, phi_dot)
        G_phi = np.einsum("ij,njk->nik", mi.M_g, dw_dphi)
        if sm:
            G_phi = G_phi + np.einsum("ij,njk->nik", mi.M_s, das_dphi)
        G_phidot = np.einsum("ij,njk->nik", mi.M_g, Jr)
        Jg_cp = np.empty((n, 3, k_p, 6))
        Jg_cp[:, :, :, 0:3] = -(G_phi[:, :, None, :] * pw[0][:, None, :, None]
                                + G_phidot[:, :, None, :] * pw[1][:, None, :, None]) / s_g
        if sm:
            Ms_Rt = np.einsum("ij,njk->nik", mi.M_s, Rt)
            Jg_cp[:, :, :, 3:6] = -Ms_Rt[:, :, None, :] * pw[2][:, None, :, None] / s_g
            Jg_grav = -np.einsum("ij,njk->nik", mi.M_s, das_dgrav) / s_g
        else:
            Jg_cp[:, :, :, 3:6] = 0.0
            Jg_grav = None

        extras = {}
        if sm:
            Jm_a = np.zeros((n, 3, 6))
            for col, (r_, c_) in enumerate(_MA_ENTRIES):
                Jm_a[:, r_, col] = -a_s[:, c_] / s_a
            Jm_g = np.zeros((n, 3, 9))
            Jm_s = np.zeros((n, 3, 9))
            for r_ in range(3):
                for c_ in range(3):
                    Jm_g[:, r_, 3 * r_ + c_] = -omega[:, c_] / s_g
                    Jm_s[:, r_, 3 * r_ + c_] = -a_s[:, c_] / s_g
            extras = {"Jm_a": Jm_a, "Jm_g": Jm_g, "Jm_s": Jm_s}

        return (res_a, res_g, pidx, bidx, bw[0], Ja_cp, Ja_grav, Jg_cp,
                Jg_grav, extras)

    # ------------------------------------------------------ bias prior block

    def _bias_prior(self, st: ParameterBlock, want_jac: bool):
        noise = self.noise
        bias = st.bias_spline
        t = self.prior_t
        idx, cps, w = self._gather(bias, t, (0, 1))
        d = np.einsum("nk,nkd->nd", w[1], cps)
        root_dt = np.sqrt(self.prior_dt)
        res = np.concatenate([
            d[:, ACCEL_BIAS] / noise.sigma_ba,
            d[:, GYRO_BIAS] / noise.sigma_bg,
        ], axis=1) * root_dt
        if not want_jac:
            return res
        return res, idx, w[1] * root_dt

    # --------------------------------------------------------------- stacking

    def residuals(self, st: ParameterBlock):
        r_obs, counters = self._reprojection(st, want_jac=False)
        res_a, res_g = self._imu(st, want_jac=False)
        r_prior = self._bias_prior(st, want_jac=False)
        self.dropped_reprojection, self.dropped_behind_camera = counters
        return np.concatenate([r_obs.ravel(), res_a.ravel(), res_g.ravel(),
                               r_prior.ravel()])

    def residuals_and_jacobian(self, st: ParameterBlock):
        lay = self.layout
        k_p = st.pose_spline.order
        k_b = st.bias_spline.order
        builder = _JacobianBuilder()

        r_obs, counters, idx, J_cp, J_T, dr_dt = self._reprojection(st, True)
        self.dropped_reprojection, self.dropped_behind_camera = counters
        n = self.n_obs
        rows0 = 2 * np.arange(n)
        cp_cols = (6 * idx[:, :, None] + np.arange(6)).reshape(n, 6 * k_p)
        builder.add(rows0, J_cp.reshape(n, 2, 6 * k_p), cp_cols)
        builder.add(rows0, J_T, lay.extrinsic + np.arange(6))
        if lay.t_IC is not None:
            builder.add(rows0, dr_dt[:, :, None], np.array([lay.t_IC]))
        if lay.line_delay is not None:
            builder.add(rows0, (dr_dt * self.row_eff[:, None])[:, :, None],
                        np.array([lay.line_delay]))

        (res_a, res_g, pidx, bidx, bw0, Ja_cp, Ja_grav, Jg_cp, Jg_grav,
         extras) = self._imu(st, True)
        m = self.n_imu
        s_a = self.noise.accel_sample_std
        s_g = self.noise.gyro_sample_std
        pose_cols = (6 * pidx[:, :, None] + np.arange(6)).reshape(m, 6 * k_p)
        arows = 2 * n + 3 * np.arange(m)
        grows = 2 * n + 3 * m + 3 * np.arange(m)
        builder.add(arows, Ja_cp.reshape(m, 3, 6 * k_p), pose_cols)
        builder.add(grows, Jg_cp.reshape(m, 3, 6 * k_p), pose_cols)

        # bias columns: accel residual rows hit dims 3:6, gyro rows dims 0:3
        acc_cols = lay.bias + (6 * bidx[:, :, None] + np.arange(3, 6)).reshape(m, 3 * k_b)
        gyr_cols = lay.bias + (6 * bidx[:, :, None] + np.arange(0, 3)).reshape(m, 3 * k_b)
        eye3 = np.eye(3)
        Jb_acc = -(bw0[:, None, :, None] * eye3[None, :, None, :] / s_a)
        Jb_gyr = -(bw0[:, None, :, None] * eye3[None, :, None, :] / s_g)
        builder.add(arows, Jb_acc.reshape(m, 3, 3 * k_b), acc_cols)
        builder.add(grows, Jb_gyr.reshape(m, 3, 3 * k_b), gyr_cols)

        builder.add(arows, Ja_grav, lay.gravity + np.arange(2))
        if Jg_grav is not None:
            builder.add(grows, Jg_grav, lay.gravity + np.arange(2))
        if lay.imu_matrices is not None:
            builder.add(arows, extras["Jm_a"], lay.imu_matrices + np.arange(6))
            builder.add(grows, extras["Jm_g"], lay.imu_matrices + 6 + np.arange(9))
            builder.add(grows, extras["Jm_s"], lay.imu_matrices + 15 + np.arange(9))

        r_prior, idx_pr, w1 = self._bias_prior(st, True)
        q = self.n_prior
        prows = 2 * n + 6 * m + 6 * np.arange(q)
        # rows 0-2: accel derivative / sigma_ba; rows 3-5: gyro / sigma_bg
        Jpr_acc = (w1[:, None, :, None] * eye3[None, :, None, :]
                   / self.noise.sigma_ba)
        Jpr_gyr = (w1[:, None, :, None] * eye3[None, :, None, :]
                   / self.noise.sigma_bg)
        acc_cols_p = lay.bias + (6 * idx_pr[:, :, None] + np.arange(3, 6)).reshape(q, 3 * k_b)
        gyr_cols_p = lay.bias + (6 * idx_pr[:, :, None] + np.arange(0, 3)).reshape(q, 3 * k_b)
        builder.add(prows, Jpr_acc.reshape(q, 3, 3 * k_b), acc_cols_p)
        builder.add(prows + 3, Jpr_gyr.reshape(q, 3, 3 * k_b), gyr_cols_p)

        r = np.concatenate([r_obs.ravel(), res_a.ravel(), res_g.ravel(),
                            r_prior.ravel()])
        J = builder.build(self.num_rows, lay.total)
        return r, J

    # ----------------------------------------------------------------- steps

    def apply_step(self, st: ParameterBlock, delta):
        lay = self.layout
        new = st.copy()
        new.pose_spline.control_points += delta[lay.pose:lay.bias].reshape(-1, 6)
        new.bias_spline.control_points += delta[lay.bias:lay.extrinsic].reshape(-1, 6)
        dth = delta[lay.extrinsic:lay.extrinsic + 3]
        dp = delta[lay.extrinsic + 3:lay.extrinsic + 6]
        new.T_CI = RigidTransform(angle_axis_to_rotation(dth) @ st.T_CI.rotation,
                                  st.T_CI.translation + dp)
        if lay.t_IC is not None:
            new.t_IC = st.t_IC + delta[lay.t_IC]
        if lay.line_delay is not None:
            new.line_delay = float(np.clip(st.line_delay + delta[lay.line_delay],
                                           *LINE_DELAY_BOUNDS))
        E = gravity_tangent_basis(st.gravity.direction)
        xi = E @ delta[lay.gravity:lay.gravity + 2]
        direction = angle_axis_to_rotation(xi) @ st.gravity.direction
        direction /= np.linalg.norm(direction)
        new.gravity = GravityState(direction, st.gravity.magnitude)
        if lay.imu_matrices is not None:
            o = lay.imu_matrices
            M_a = st.imu_intrinsics.M_a.copy()
            for col, (r_, c_) in enumerate(_MA_ENTRIES):
                M_a[r_, c_] += delta[o + col]
            np.fill_diagonal(M_a, np.maximum(np.diag(M_a), MIN_ACCEL_SCALE))
            new.imu_intrinsics = ImuIntrinsics(
                model=SCALE_MISALIGNMENT,
                M_a=M_a,
                M_g=st.imu_intrinsics.M_g + delta[o + 6:o + 15].reshape(3, 3),
                M_s=st.imu_intrinsics.M_s + delta[o + 15:o + 24].reshape(3, 3))
        return new


@dataclass
class ResidualStats:
    count: int
    median: float
    rms: float
    median_unwhitened: float
    rms_unwhitened: float


@dataclass
class CalibrationReport:
    parameters: ParameterBlock
    stats: dict
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    converged: bool
    dropped_reprojection: int
    dropped_behind_camera: int
    dropped_imu_samples: int
    time_offset_warning: str = None

    @property
    def median_reprojection_px(self):
        return self.stats["reprojection"].median_unwhitened


def assemble(observations, imu_stream, config, initial: ParameterBlock,
             landmark_points, intrinsics, noise: ImuNoise) -> CalibrationProblem:
    """Build the residual set; deterministic for identical inputs."""
    problem = CalibrationProblem(observations, imu_stream, config, initial,
                                 landmark_points, intrinsics)
    problem.noise = noise
    return problem


def _stats(norms, factor):
    if norms.shape[0] == 0:
        return ResidualStats(0, 0.0, 0.0, 0.0, 0.0)
    med = float(np.median(norms))
    rms = float(np.sqrt(np.mean(norms ** 2)))
    return ResidualStats(int(norms.shape[0]), med, rms, med * factor, rms * factor)


def solve(problem: CalibrationProblem, config: CalibrationConfig = None
          ) -> CalibrationReport:
    """Levenberg-Marquardt on the assembled problem."""
    cfg = config or problem.config
    st = problem.state.copy()
    r = problem.residuals(st)
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        raise NumericalFailureError("non-finite initial cost")
    initial_cost = cost

    lam = 1e-4
    termination = "max_iterations"
    converged = False
    iterations = 0
    lay = problem.layout
    for iterations in range(1, cfg.max_iterations + 1):
        r, J = problem.residuals_and_jacobian(st)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = H.diagonal()
        # floor the damping per parameter block: control points with no (or
        # vanishing) data support would otherwise blow up the damped solve
        damp = diag.copy()
        for a, b in ((lay.pose, lay.bias), (lay.bias, lay.extrinsic),
                     (lay.extrinsic, lay.total)):
            seg = diag[a:b]
            positive = seg[seg > 0]
            floor = 1e-8 * np.median(positive) if positive.size else 1.0
            damp[a:b] = np.maximum(seg, max(floor, 1e-30))

        accepted = False
        for _ in range(12):
            Hd = H + sparse.diags(lam * damp, format="csc")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    delta = spsolve(Hd, -g)
                except RuntimeError:
                    delta = np.full(problem.layout.total, np.nan)
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            trial = problem.apply_step(st, delta)
            r_trial = problem.residuals(trial)
            cost_trial = 0.5 * float(r_trial @ r_trial)
            if np.isfinite(cost_trial) and cost_trial < cost:
                accepted = True
                break
            lam *= 10.0
            if lam > 1e10:
                break
        if not accepted:
            termination = "stalled"
            break

        step_norm = float(np.linalg.norm(delta))
        ref_norm = float(np.linalg.norm(np.concatenate([
            st.pose_spline.control_points.ravel(),
            st.bias_spline.control_points.ravel()])))
        decrease = cost - cost_trial
        st = trial
        cost = cost_trial
        lam = max(lam / 10.0, 1e-12)
        if decrease <= cfg.function_tolerance * max(cost, 1e-300):
            termination = "function_tolerance"
            converged = True
            break
        if step_norm <= cfg.parameter_tolerance * (ref_norm + cfg.parameter_tolerance):
            termination = "parameter_tolerance"
            converged = True
            break
    else:
        termination = "max_iterations"

    # final statistics on whitened and unwhitened residuals
    r = problem.residuals(st)
    n, m, q = problem.n_obs, problem.n_imu, problem.n_prior
    r_obs = r[:2 * n].reshape(n, 2)
    ra = r[2 * n:2 * n + 3 * m].reshape(m, 3)
    rg = r[2 * n + 3 * m:2 * n + 6 * m].reshape(m, 3)
    rp = r[2 * n + 6 * m:].reshape(q, 6)
    obs_norm = np.linalg.norm(r_obs, axis=1)
    valid_mask = np.any(r_obs != 0.0, axis=1)
    stats = {
        "reprojection": _stats(obs_norm[valid_mask], cfg.sigma_c),
        "accelerometer": _stats(np.linalg.norm(ra, axis=1),
                                problem.noise.accel_sample_std),
        "gyroscope": _stats(np.linalg.norm(rg, axis=1),
                            problem.noise.gyro_sample_std),
        "bias_prior": _stats(np.linalg.norm(rp, axis=1), 1.0),
    }
    return CalibrationReport(
        parameters=st,
        stats=stats,
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=cost,
        termination=termination,
        converged=converged or termination in ("function_tolerance",
                                               "parameter_tolerance"),
        dropped_reprojection=problem.dropped_reprojection,
        dropped_behind_camera=problem.dropped_behind_camera,
        dropped_imu_samples=problem.dropped_imu_samples,
    )


def initialize_gravity(pose_view: PoseSplineView, imu_t, imu_accel,
                       magnitude=STANDARD_GRAVITY) -> GravityState:
    """Gravity direction from g ~ p_ddot - R a_m averaged over the stream."""
    t = np.asarray(imu_t, dtype=float)
    keep = (t >= pose_view.t_min) & (t <= pose_view.t_max)
    t = t[keep][::5]
    acc = np.asarray(imu_accel, dtype=float)[keep][::5]
    if t.shape[0] < 10:
        raise InsufficientDataError("too few IMU samples for gravity init")
    state = pose_view.spline.evaluate(t)
    R = angle_axis_to_rotation(state[:, 0:3])
    p_ddot = pose_view.translation(t, derivative=2)
    g = p_ddot - np.einsum("nij,nj->ni", R, acc)
    mean = g.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-6:
        raise InsufficientDataError("gravity direction unobservable")
    return GravityState(mean / norm, magnitude)


def calibrate(observations, imu_stream, intrinsics, landmark_points,
              config: CalibrationConfig, noise: ImuNoise,
              initial_T_CI: RigidTransform = None) -> CalibrationReport:
    """Full pipeline: trajectory init, time offset, assembly, and solve."""
    if initial_T_CI is None:
        warnings.warn("no initial camera-IMU transform given; starting from "
                      "identity may slow or prevent convergence")
        initial_T_CI = RigidTransform.identity()

    tinit = initialize_trajectory(observations, intrinsics, landmark_points,
                                  config, initial_T_CI)
    offset_warning = None
    if config.initial_time_offset is not None:
        t_IC0 = config.initial_time_offset
    elif config.estimate_time_offset:
        t_IC0, offset_warning = initialize_time_offset(observations, imu_stream,
                                                       tinit)
    else:
        t_IC0 = 0.0

    d0 = config.initial_line_delay
    if d0 is None:
        d0 = DEFAULT_LINE_DELAY_INIT if config.estimate_line_delay else 0.0
    d0 = float(np.clip(d0, *LINE_DELAY_BOUNDS))

    # final initial spline on the IMU-clock grid covering every observation
    temporal = cam.CameraTemporal(t_IC=0.0, line_delay=0.0,
                                  timestamp_convention=config.timestamp_convention)
    row_eff = cam.row_offset(temporal, np.asarray(observations.pixels)[:, 1],
                             intrinsics.height)
    t_obs0 = np.asarray(observations.frame_times) + t_IC0 + row_eff * d0
    margin = config.domain_margin
    pose_grid = grid_for_span(t_obs0.min() - margin, t_obs0.max() + margin,
                              config.pose_knot_rate_hz, config.spline_order)
    bias_grid = grid_for_span(t_obs0.min() - margin, t_obs0.max() + margin,
                              config.bias_knot_rate_hz, config.spline_order)

    phis_times = tinit.frame_times + t_IC0
    samples = np.hstack([
        np.asarray([rotation_to_angle_axis(p.rotation) for p in tinit.poses_WI]),
        np.asarray([p.translation for p in tinit.poses_WI])])
    samples[:, 0:3] = np.asarray(enforce_continuity(list(samples[:, 0:3])))
    # resample the per-frame poses densely over the whole grid domain (linear
    # interpolation, constant beyond the data) and fit with a stiff curvature
    # penalty; fitting the raw frames directly would leave boundary control
    # points unconstrained and ring at the knot rate, blowing up the second
    # derivative the IMU residuals consume
    lo_dom, hi_dom = pose_grid.domain(config.spline_order)
    dense_t = np.arange(lo_dom, hi_dom + 1e-9, 0.25 * pose_grid.dt)
    dense = np.stack([np.interp(dense_t, phis_times, samples[:, d])
                      for d in range(6)], axis=1)
    pose_spline = fit_least_squares(dense_t, dense, config.spline_order,
                                    pose_grid, smoothing_weight=1e-2)
    pose_view = PoseSplineView(pose_spline)

    bias_cps = np.zeros((bias_grid.count - config.spline_order, 6))
    bias_spline = VectorSpline(config.spline_order, bias_grid, bias_cps)

    gravity = initialize_gravity(pose_view, imu_stream.times, imu_stream.accel,
                                 config.gravity_magnitude)
    imu_intr = ImuIntrinsics(model=config.imu_model)
    initial = ParameterBlock(
        pose_spline=pose_spline,
        bias_spline=bias_spline,
        T_CI=initial_T_CI,
        t_IC=t_IC0,
        line_delay=d0,
        gravity=gravity,
        imu_intrinsics=imu_intr,
    )
    problem = assemble(observations, imu_stream, config, initial,
                       landmark_points, intrinsics, noise)
    report = solve(problem, config)
    report.time_offset_warning = offset_warning
    return report


@dataclass
class ErrorSummary:
    rotation_deg: float
    translation_m: float
    time_offset_s: float
    line_delay_s: float
    median_reprojection_px: float = None


def evaluate_report(report, reference) -> ErrorSummary:
    """Errors of a report (or bare ParameterBlock) against reference values.

    ``reference`` needs T_CI, t_IC, and line_delay attributes or keys.
    """
    est = getattr(report, "parameters", report)

    def get(obj, name):
        if isinstance(obj, dict):
            return obj[name]
        return getattr(obj, name)

    rot_deg, trans_m = extrinsic_error(
        RigidTransform(get(reference, "T_CI").rotation,
                       get(reference, "T_CI").translation),
        est.T_CI)
    dt = abs(get(reference, "t_IC") - est.t_IC)
    dd = abs(get(reference, "line_delay") - est.line_delay)
    return ErrorSummary(rotation_deg=rot_deg, translation_m=trans_m,
                        time_offset_s=dt, line_delay_s=dd,
                        median_reprojection_px=getattr(
                            report, "median_reprojection_px", None))
