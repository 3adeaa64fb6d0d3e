"""Allan deviation and slope-based IMU noise identification.

The overlapping Allan variance of a uniformly sampled signal y at averaging
time tau = m/rate is

    sigma^2(tau) = 1 / (2 (N - 2m) tau^2) * sum_i (th_{i+2m} - 2 th_{i+m} + th_i)^2

on the cumulative integral th of y. On a log-log plot the white-noise region
has slope -1/2 (value at tau = 1 s reads the noise density), the bias
instability region is flat, and the rate-random-walk region has slope +1/2
(the fitted line evaluated at tau = 3 s reads the random-walk density,
since adev = K sqrt(tau/3)).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError

TAU_POINTS = 200
VALIDITY_DIVISOR = 9  # overlapping estimator degrades beyond duration/9
SLOPE_TOLERANCE = 0.15
WINDOW_HALF_DECADE = 0.25  # +-0.25 decades = half a decade total


@dataclass
class AllanCurve:
    taus: np.ndarray
    adev: np.ndarray

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.adev = np.asarray(self.adev, dtype=float)
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError("taus must be strictly increasing")


@dataclass
class NoiseEstimate:
    """Per-channel extraction result; absent regions leave fields None."""

    white_density: float = None       # value of the -1/2 line at tau = 1 s
    bias_stability: float = None      # minimum of the curve (raw by default)
    random_walk_density: float = None  # value of the +1/2 line at tau = 3 s


def default_taus(n_samples: int, rate_hz: float):
    duration = n_samples / rate_hz
    lo = 2.0 / rate_hz
    hi = duration / VALIDITY_DIVISOR
    if hi <= lo:
        raise InsufficientDataError("stream too short for Allan analysis")
    return np.geomspace(lo, hi, TAU_POINTS)


def allan_deviation(samples, rate_hz: float, taus=None) -> AllanCurve:
    """Overlapping Allan deviation of one channel (or columns of channels).

    Requested taus snap to integer multiples of the sample period;
    duplicates collapse. Needs at least 9 * max(tau) * rate samples.
    """
    y = np.asarray(samples, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
    n = y.shape[0]
    if taus is None:
        taus = default_taus(n, rate_hz)
    ms = np.unique(np.clip((np.asarray(taus) * rate_hz).round().astype(int), 1, None))
    ms = ms[ms <= (n - 1) // 2]
    if ms.size == 0 or n < VALIDITY_DIVISOR * ms.max():
        raise InsufficientDataError(
            f"{n} samples cannot support taus up to {ms.max() / rate_hz if ms.size else np.nan} s")

    dt = 1.0 / rate_hz
    theta = np.vstack([np.zeros((1, y.shape[1])), np.cumsum(y, axis=0) * dt])
    out = np.empty((ms.size, y.shape[1]))
    for i, m in enumerate(ms):
        d = theta[2 * m:] - 2.0 * theta[m:-m] + theta[:-2 * m]
        tau = m * dt
        out[i] = np.sqrt(np.mean(d * d, axis=0) / (2.0 * tau * tau))
    curve = AllanCurve(taus=ms * dt, adev=out[:, 0] if single else out)
    return curve


def _local_slopes(log_tau, log_adev):
    """Least-squares slope in a sliding half-decade window around each point."""
    n = log_tau.shape[0]
    slopes = np.full(n, np.nan)
    for i in range(n):
        sel = np.abs(log_tau - log_tau[i]) <= WINDOW_HALF_DECADE
        if np.count_nonzero(sel) < 3:
            continue
        x, z = log_tau[sel], log_adev[sel]
        xc = x - x.mean()
        denom = float(xc @ xc)
        if denom > 0:
            slopes[i] = float(xc @ (z - z.mean())) / denom
    return slopes


def _fit_fixed_slope(log_tau, log_adev, sel, slope, tau_ref):
    """Intercept-only fit of a fixed-slope line, evaluated at tau_ref."""
    intercept = np.mean(log_adev[sel] - slope * log_tau[sel])
    return float(10.0 ** (intercept + slope * np.log10(tau_ref)))


def extract_noise_params(curve: AllanCurve, tau_ranges: dict = None
                         ) -> NoiseEstimate:
    """Slope-region extraction of (white, bias stability, random walk).

    Regions are detected by local-slope windowing: the white-noise region is
    the contiguous run of slope -1/2 (+-0.15) extending from small tau, the
    random-walk region the run of slope +1/2 at large tau. ``tau_ranges``
    can override detection with explicit {'white': (lo, hi),
    'random_walk': (lo, hi)} bounds. Missing regions leave fields None,
    mirroring absent entries in real analyses.
    """
    taus = curve.taus
    adev = np.asarray(curve.adev, dtype=float)
    if adev.ndim != 1:
        raise ValueError("extract_noise_params works on one channel at a time")
    good = adev > 0
    log_tau = np.log10(taus[good])
    log_adev = np.log10(adev[good])
    if log_tau.size < 5 or log_tau[-1] - log_tau[0] < 1.0:
        raise InsufficientDataError("Allan curve spans too little tau range")

    est = NoiseEstimate()

    def region(lt, la, target, override, tau_values):
        if override is not None:
            sel = (tau_values >= override[0]) & (tau_values <= override[1])
            return sel if np.count_nonzero(sel) >= 2 else None
        slopes = _local_slopes(lt, la)
        ok = np.abs(slopes - target) <= SLOPE_TOLERANCE
        if not np.any(ok):
            return None
        idx = np.flatnonzero(ok)
        # contiguous run nearest the small-tau end for -1/2, large-tau for +1/2
        runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        runs = [r for r in runs if r.size >= 2]
        if not runs:
            return None
        run = runs[0] if target < 0 else runs[-1]
        sel = np.zeros(lt.size, dtype=bool)
        sel[run] = True
        return sel

    ranges = tau_ranges or {}
    tau_good = taus[good]
    white_sel = region(log_tau, log_adev, -0.5, ranges.get("white"), tau_good)
    if white_sel is not None:
        est.white_density = _fit_fixed_slope(log_tau, log_adev, white_sel,
                                             -0.5, tau_ref=1.0)

    # flat region on the raw curve decides whether a stability floor exists;
    # a pure white-noise curve keeps falling and gets no bias stability
    flat_sel = region(log_tau, log_adev, 0.0, ranges.get("bias"), tau_good)
    if flat_sel is not None:
        est.bias_stability = float(adev[good].min())

    # for the random walk, subtract the fitted white component from the
    # variance first: near the validity bound the estimator has few clusters
    # and the raw +1/2 slope is unreliable, while the residual curve is clean
    # wherever the walk carries a meaningful share of the variance
    avar = adev[good] ** 2
    if est.white_density is not None:
        resid = avar - est.white_density ** 2 / tau_good
        meaningful = resid > 0.3 * avar
    else:
        resid = avar
        meaningful = np.ones(avar.size, dtype=bool)
    if np.count_nonzero(meaningful) >= 3:
        lt_r = log_tau[meaningful]
        la_r = 0.5 * np.log10(resid[meaningful])
        rw_sel = region(lt_r, la_r, 0.5, ranges.get("random_walk"),
                        tau_good[meaningful])
        if rw_sel is not None:
            est.random_walk_density = _fit_fixed_slope(lt_r, la_r, rw_sel,
                                                       0.5, tau_ref=3.0)
    return est


def analyze_stream(channels, rate_hz: float, taus=None, tau_ranges=None):
    """Allan curves and noise estimates for an (n, c) multi-channel stream.

    Returns (curves, estimates) with one AllanCurve and NoiseEstimate per
    column.
    """
    arr = np.asarray(channels, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    multi = allan_deviation(arr, rate_hz, taus)
    curves, estimates = [], []
    for c in range(arr.shape[1]):
        curve = AllanCurve(taus=multi.taus, adev=multi.adev[:, c])
        curves.append(curve)
        estimates.append(extract_noise_params(curve, tau_ranges))
    return curves, estimates
