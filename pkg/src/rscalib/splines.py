"""Vector-valued uniform B-splines.

An order-k spline over a uniform knot grid is a piecewise polynomial of
degree k-1. Values are evaluated in matrix form: for the segment
[t_j, t_{j+1}) with local coordinate u = (t - t_j)/dt, the value is

    v(t) = [v_{j-k+1} ... v_j] @ M @ (1, u, ..., u^{k-1})

where M is the constant k x k blending matrix for uniform knots. The
classic recursive basis definition is kept as ``basis_weight`` and serves
as the independent oracle for the matrix path.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import DomainError, RankDeficiencyError

MAX_ORDER = 10


@dataclass(frozen=True)
class KnotGrid:
    """Uniform knots t0 + i*dt for i = 0..count-1."""

    t0: float
    dt: float
    count: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"knot spacing must be positive, got {self.dt}")
        if self.count < 2:
            raise ValueError(f"need at least 2 knots, got {self.count}")

    def knot(self, i):
        return self.t0 + i * self.dt

    def domain(self, k):
        """Closed interval [t_{k-1}, t_{count-k}] usable by an order-k spline."""
        if self.count < 2 * k:
            raise ValueError(f"{self.count} knots cannot host an order-{k} spline")
        return self.knot(k - 1), self.knot(self.count - k)


@dataclass(frozen=True)
class BlendMatrix:
    order_k: int
    entries: np.ndarray  # (k, k), row i holds the u-polynomial of local weight i


@lru_cache(maxsize=None)
def blend_matrix_uniform(k: int) -> BlendMatrix:
    """Blending matrix for uniform knots, entries from the closed form

        m[i, j] = C(k-1, j)/(k-1)! * sum_{s=i}^{k-1} (-1)^(s-i) C(k, s-i) (k-1-s)^(k-1-j)

    with 0^0 = 1.
    """
    if not 1 <= k <= MAX_ORDER:
        raise ValueError(f"order must be in [1, {MAX_ORDER}], got {k}")
    m = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            acc = 0.0
            for s in range(i, k):
                base = k - 1 - s
                power = k - 1 - j
                term = 1.0 if (base == 0 and power == 0) else float(base) ** power
                acc += (-1) ** (s - i) * comb(k, s - i) * term
            m[i, j] = comb(k - 1, j) / factorial(k - 1) * acc
    m.setflags(write=False)
    return BlendMatrix(order_k=k, entries=m)


def basis_weight(knots: KnotGrid, j: int, k: int, t: float) -> float:
    """B_{j,k}(t) by the classic recursion. Test oracle for the matrix path.

    Valid for 0 <= j <= count-k-1 and t in [t_{k-1}, t_{count-k}).
    """
    if not 0 <= j <= knots.count - k - 1:
        raise IndexError(f"basis index {j} out of range for order {k}")
    lo, hi = knots.domain(k)
    if t < lo or t >= hi:
        raise DomainError(f"t={t} outside valid domain [{lo}, {hi})")
    return _cox_de_boor(knots, j, k, t)


def _cox_de_boor(knots, j, k, t):
    if k == 1:
        return 1.0 if knots.knot(j) <= t < knots.knot(j + 1) else 0.0
    left_den = knots.knot(j + k - 1) - knots.knot(j)
    right_den = knots.knot(j + k) - knots.knot(j + 1)
    left = (t - knots.knot(j)) / left_den * _cox_de_boor(knots, j, k - 1, t)
    right = (knots.knot(j + k) - t) / right_den * _cox_de_boor(knots, j + 1, k - 1, t)
    return left + right


def segment_of(knots: KnotGrid, k: int, t):
    """Segment index j with t in [t_j, t_{j+1}) and local coordinate u in [0, 1).

    The exact right end of the domain maps to the last segment with u = 1,
    so the final sample of a dataset stays usable. Accepts scalars or arrays.
    """
    t_arr = np.asarray(t, dtype=float)
    lo, hi = knots.domain(k)
    if np.any(t_arr < lo) or np.any(t_arr > hi):
        raise DomainError(f"evaluation time outside valid domain [{lo}, {hi}]")
    s = (t_arr - knots.t0) / knots.dt
    j = np.clip(np.floor(s).astype(np.int64), k - 1, knots.count - k - 1)
    u = np.clip(s - j, 0.0, 1.0)
    if t_arr.ndim == 0:
        return int(j), float(u)
    return j, u


def _u_derivative_matrix(u, k, r, dt):
    """Rows of d^r/dt^r (1, u, ..., u^{k-1}) stacked along the last axis."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (k,))
    coef = np.ones(k - r)
    powers = np.arange(r, k)
    for i in range(r):
        coef = coef * (powers - i)
    out[..., r:] = coef * u[..., None] ** np.arange(k - r)
    return out / dt**r


def evaluation_weights(knots: KnotGrid, k: int, t, derivative: int = 0):
    """Active control-point weights at t.

    Returns (first_index, W): the spline value (or r-th time derivative) is
    sum_i W[..., i] * control_points[first_index + i]. Used directly by the
    estimator to express residual Jacobians in terms of control points.
    """
    if derivative >= k or derivative < 0:
        raise ValueError(f"derivative order {derivative} invalid for order {k}")
    j, u = segment_of(knots, k, t)
    m = blend_matrix_uniform(k).entries
    w = _u_derivative_matrix(u, k, derivative, knots.dt) @ m.T
    return j - (k - 1), w


class VectorSpline:
    """Uniform B-spline of an R^D-valued function.

    Control points form an (N, D) array with N = count - k. Values outside
    the valid domain [t_{k-1}, t_{count-k}] raise DomainError. The spline is
    treated as immutable after construction; the estimator replaces the
    control-point array wholesale when it updates the state.
    """

    def __init__(self, order: int, knots: KnotGrid, control_points):
        if not 1 <= order <= MAX_ORDER:
            raise ValueError(f"order must be in [1, {MAX_ORDER}], got {order}")
        cps = np.array(control_points, dtype=float)
        if cps.ndim == 1:
            cps = cps[:, None]
        expect = knots.count - order
        if cps.shape[0] != expect:
            raise ValueError(
                f"expected {expect} control points for {knots.count} knots "
                f"at order {order}, got {cps.shape[0]}"
            )
        if expect < order:
            raise ValueError("knot grid too short to host a full segment")
        self.order = order
        self.knots = knots
        self.control_points = cps

    @property
    def dim(self):
        return self.control_points.shape[1]

    @property
    def num_control_points(self):
        return self.control_points.shape[0]

    @property
    def t_min(self):
        return self.knots.knot(self.order - 1)

    @property
    def t_max(self):
        return self.knots.knot(self.knots.count - self.order)

    def contains(self, t):
        t = np.asarray(t, dtype=float)
        return (t >= self.t_min) & (t <= self.t_max)

    def evaluate(self, t, derivative: int = 0):
        """Value or analytic time derivative at t (scalar or array)."""
        base, w = evaluation_weights(self.knots, self.order, t, derivative)
        idx = np.asarray(base)[..., None] + np.arange(self.order)
        gathered = self.control_points[idx]
        out = np.einsum("...i,...id->...d", w, gathered)
        return out

    def with_control_points(self, control_points):
        return VectorSpline(self.order, self.knots, control_points)


def evaluate(spline: VectorSpline, t, derivative: int = 0):
    return spline.evaluate(t, derivative)


def fit_least_squares(times, values, k: int, knots: KnotGrid,
                      smoothing_weight: float = 1e-6) -> VectorSpline:
    """Least-squares spline fit to sampled data.

    Minimizes sum ||v(t_s) - y_s||^2 plus a curvature penalty
    smoothing_weight * sum ||v''(segment midpoint)||^2 * dt that keeps the
    problem solvable with sparse initialization data. The normal equations
    are banded (bandwidth k) and solved with a sparse LU factorization
    shared across dimensions.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if times.ndim != 1 or values.shape[0] != times.shape[0]:
        raise ValueError("times and values must align on the first axis")
    if np.any(np.diff(times) < 0):
        raise ValueError("sample times must be sorted")
    if smoothing_weight < 0:
        raise ValueError("smoothing_weight must be nonnegative")
    n_cp = knots.count - k
    if smoothing_weight == 0 and times.shape[0] < n_cp:
        raise RankDeficiencyError(
            f"{times.shape[0]} samples cannot determine {n_cp} control points"
        )

    base, w = evaluation_weights(knots, k, times, derivative=0)
    rows = np.repeat(np.arange(times.shape[0]), k)
    cols = (base[:, None] + np.arange(k)).ravel()
    blocks = [sparse.coo_matrix((w.ravel(), (rows, cols)),
                                shape=(times.shape[0], n_cp))]
    rhs = [values]

    if smoothing_weight > 0 and k >= 3:
        lo, hi = knots.domain(k)
        n_seg = knots.count - 2 * k + 1
        mids = lo + (np.arange(n_seg) + 0.5) * knots.dt
        base2, w2 = evaluation_weights(knots, k, mids, derivative=2)
        scale = np.sqrt(smoothing_weight * knots.dt)
        rows2 = np.repeat(np.arange(n_seg), k)
        cols2 = (base2[:, None] + np.arange(k)).ravel()
        blocks.append(sparse.coo_matrix((scale * w2.ravel(), (rows2, cols2)),
                                        shape=(n_seg, n_cp)))
        rhs.append(np.zeros((n_seg, values.shape[1])))

    design = sparse.vstack(blocks).tocsr()
    normal = (design.T @ design).tocsc()
    if smoothing_weight == 0:
        counts = np.diff(design.tocsc().indptr)
        if np.any(counts == 0):
            raise RankDeficiencyError("some control points receive no data")
    try:
        factor = splu(normal)
    except RuntimeError as exc:
        raise RankDeficiencyError(f"normal equations singular: {exc}") from exc
    atb = design.T @ np.vstack(rhs)
    cps = factor.solve(atb)
    if not np.all(np.isfinite(cps)):
        raise RankDeficiencyError("normal equations numerically singular")
    return VectorSpline(k, knots, cps)


def grid_for_span(t_lo: float, t_hi: float, rate_hz: float, k: int,
                  snap: bool = True) -> KnotGrid:
    """Knot grid whose valid domain covers [t_lo, t_hi].

    The grid is padded by (k - 1) intervals on each side so boundary samples
    stay inside the valid domain. With snap the grid origin is aligned to the
    absolute lattice {i/rate}, which keeps splines built on the same rate in
    a common function space.
    """
    if t_hi <= t_lo:
        raise ValueError("empty time span")
    dt = 1.0 / rate_hz
    start = np.floor(t_lo / dt) * dt if snap else t_lo
    n_seg = int(np.ceil((t_hi - start) / dt - 1e-12))
    n_seg = max(n_seg, 1)
    t0 = start - (k - 1) * dt
    count = n_seg + 2 * k - 1
    grid = KnotGrid(t0=t0, dt=dt, count=count)
    lo, hi = grid.domain(k)
    assert lo <= t_lo + 1e-12 and hi >= t_hi - 1e-12
    return grid
