"""Rotations, rigid transforms, and the pose-spline interpretation.

Rotations are plain 3x3 arrays; the spline state is angle-axis so a single
conversion path (Rodrigues and its inverse) covers everything. All vector
functions broadcast over leading axes, which lets the estimator evaluate
residuals for whole observation batches without separate code.
"""

from dataclasses import dataclass, field

import numpy as np

from .splines import VectorSpline

_SMALL_ANGLE = 1e-8


def skew(v):
    """Cross-product matrix, batched over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _sinc_coeffs(theta):
    """(sin t / t, (1 - cos t)/t^2, (t - sin t)/t^3).

    Below t = 0.01 the closed forms lose digits to cancellation, so a
    three-term Taylor series takes over (crossover error ~4e-12 relative).
    """
    t2 = theta * theta
    small = theta < 1e-2
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (safe - np.sin(safe)) / safe**3)
    return a, b, c


def angle_axis_to_rotation(phi):
    """Rodrigues formula; near zero angle a second-order expansion is used."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _sinc_coeffs(theta)
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), phi.shape[:-1] + (3, 3))
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotation_to_angle_axis(R):
    """Minimal angle-axis with angle in [0, pi].

    Near pi the axis is recovered from the diagonal of (R + I)/2, which stays
    well conditioned where the skew part vanishes. At exactly pi the axis sign
    is fixed by making the first nonzero component positive.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        return _log_single(R)
    flat = R.reshape(-1, 3, 3)
    return np.stack([_log_single(m) for m in flat]).reshape(R.shape[:-2] + (3,))


def _log_single(R):
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _SMALL_ANGLE:
        return 0.5 * w * (1.0 + angle * angle / 6.0)
    if np.pi - angle > 1e-6:
        return angle / (2.0 * np.sin(angle)) * w
    # near pi the skew part vanishes; use R_ii = cos + (1-cos) n_i^2 and the
    # symmetric off-diagonals (R_ij + R_ji)/2 = (1-cos) n_i n_j
    one_minus_cos = 1.0 - trace
    n = np.sqrt(np.clip((np.diag(R) - trace) / one_minus_cos, 0.0, None))
    i = int(np.argmax(n))
    for j in range(3):
        if j != i:
            n[j] = (R[i, j] + R[j, i]) / (2.0 * one_minus_cos * n[i])
    n /= np.linalg.norm(n)
    if np.dot(w, n) < 0 or (np.dot(w, n) == 0 and n[int(np.argmax(np.abs(n)))] < 0):
        n = -n
    return angle * n


def right_jacobian(phi):
    """Right Jacobian of the rotation exponential.

    Satisfies exp(phi + d) ~ exp(phi) exp(J_r(phi) d); body angular velocity
    follows as omega = J_r(phi) dphi/dt.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _sinc_coeffs(theta)
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), phi.shape[:-1] + (3, 3))
    return eye - b[..., None, None] * k + c[..., None, None] * (k @ k)


def right_jacobian_product_derivative(phi, a):
    """d/dphi of J_r(phi) @ a for fixed a, batched.

    Needed for the angular-rate Jacobian: omega = J_r(phi) phidot depends on
    phi both through the weights and through J_r itself.
    """
    phi = np.asarray(phi, dtype=float)
    a = np.asarray(a, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < 5e-2
    safe = np.where(small, 1.0, theta)
    sin, cos = np.sin(safe), np.cos(safe)
    _, b, c = _sinc_coeffs(theta)
    # (db/dtheta)/theta and (dc/dtheta)/theta; the closed forms cancel twice,
    # so the series is used up to theta = 0.05
    db = np.where(small, -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
                  (safe * sin - 2.0 * (1.0 - cos)) / safe**4)
    dc = np.where(small, -1.0 / 60.0 + t2 / 1260.0 - t2 * t2 / 60480.0,
                  (safe * (1.0 - cos) - 3.0 * (safe - sin)) / safe**5)
    pxa = np.cross(phi, a)
    ppxa = np.cross(phi, pxa)
    out = (-db[..., None, None] * pxa[..., :, None] * phi[..., None, :]
           + dc[..., None, None] * ppxa[..., :, None] * phi[..., None, :]
           + b[..., None, None] * skew(a)
           - c[..., None, None] * (skew(pxa) + skew(phi) @ skew(a)))
    return out


def enforce_continuity(raw):
    """Resolve 2*k*pi / axis-flip ambiguity along an angle-axis sequence.

    Each element is replaced by the equivalent representative (same rotation)
    nearest to its predecessor, drawn from phi + 2k*pi*axis for k in -2..2
    and the axis-flipped family (2pi - |phi|) * (-axis) with the same shifts.
    """
    raw = [np.asarray(p, dtype=float) for p in raw]
    if not raw:
        return []
    out = [raw[0].copy()]
    for phi in raw[1:]:
        prev = out[-1]
        best = None
        best_d = np.inf
        for cand in _equivalents(phi):
            d = np.linalg.norm(cand - prev)
            if d < best_d:
                best_d = d
                best = cand
        out.append(best)
    return out


def _equivalents(phi):
    norm = np.linalg.norm(phi)
    two_pi = 2.0 * np.pi
    cands = []
    if norm < 1e-12:
        # zero rotation: representatives are 2k*pi about any axis; keep zero
        return [phi.copy()]
    axis = phi / norm
    for k in range(-2, 3):
        cands.append(phi + k * two_pi * axis)
    flipped = -(two_pi - norm) * axis  # same rotation, flipped axis branch
    for k in range(-2, 3):
        cands.append(flipped - k * two_pi * axis)
    return cands


@dataclass(frozen=True)
class RigidTransform:
    """x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


class PoseSplineView:
    """Interpret a D=6 spline as a pose trajectory.

    Rows 0-2 of each control point are the angle-axis of the body-to-world
    rotation, rows 3-5 the world-frame translation.
    """

    def __init__(self, spline: VectorSpline):
        if spline.dim != 6:
            raise ValueError(f"pose spline needs D=6, got D={spline.dim}")
        self.spline = spline

    @property
    def t_min(self):
        return self.spline.t_min

    @property
    def t_max(self):
        return self.spline.t_max

    def angle_axis(self, t, derivative=0):
        return self.spline.evaluate(t, derivative)[..., 0:3]

    def translation(self, t, derivative=0):
        return self.spline.evaluate(t, derivative)[..., 3:6]

    def rotation(self, t):
        return angle_axis_to_rotation(self.angle_axis(t))

    def pose_at(self, t) -> RigidTransform:
        state = self.spline.evaluate(np.asarray(t, dtype=float))
        return RigidTransform(angle_axis_to_rotation(state[..., 0:3]), state[..., 3:6])


def pose_at(view: PoseSplineView, t) -> RigidTransform:
    return view.pose_at(t)


def extrinsic_error(reference: RigidTransform, estimate: RigidTransform):
    """(angle in degrees, translation in meters) between two transforms.

    Uses dR = R^T Rbar and dp = R^T (pbar - p), i.e. the deviation expressed
    in the reference frame, so the pair is invariant to a common left factor.
    """
    d_rot = reference.rotation.T @ estimate.rotation
    d_p = reference.rotation.T @ (estimate.translation - reference.translation)
    angle = np.linalg.norm(rotation_to_angle_axis(d_rot))
    return np.degrees(angle), float(np.linalg.norm(d_p))
