"""File formats: observation and IMU CSVs, YAML configs, reports.

CSV columns are fixed and a header row is mandatory. Floats are written with
Python's shortest round-trip repr, so write -> read -> write is
byte-identical. Reports and simulator ground-truth files share one YAML
schema, so the evaluate command consumes either side.
"""

import csv
import io as _io
from pathlib import Path

import numpy as np
import yaml

from . import camera as cam
from .allan import NoiseEstimate
from .errors import DataFormatError
from .estimator import CalibrationConfig, CalibrationReport, ErrorSummary
from .geometry import RigidTransform
from .imu import CALIBRATED, SCALE_MISALIGNMENT, GravityState, ImuIntrinsics, ImuNoise
from .simulator import ImuStream, ObservationSet
from .target import TargetSpec

OBS_HEADER = ["frame_id", "frame_timestamp_s", "landmark_id", "u_px", "v_px"]
IMU_HEADER = ["timestamp_s", "gx", "gy", "gz", "ax", "ay", "az"]


def _fmt(x):
    return repr(float(x))


def _parse_float(token, path, line_no):
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(
            f"{path}: line {line_no}: cannot parse {token!r} as a number") from None


def _parse_int(token, path, line_no):
    try:
        return int(token)
    except ValueError:
        raise DataFormatError(
            f"{path}: line {line_no}: cannot parse {token!r} as an integer") from None


def write_observations(path, obs: ObservationSet):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(OBS_HEADER)
        for i in range(len(obs)):
            w.writerow([int(obs.frame_ids[i]), _fmt(obs.frame_times[i]),
                        int(obs.landmark_ids[i]), _fmt(obs.pixels[i, 0]),
                        _fmt(obs.pixels[i, 1])])


def read_observations(path) -> ObservationSet:
    frame_ids, times, land_ids, us, vs = [], [], [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != OBS_HEADER:
            raise DataFormatError(f"{path}: expected header {OBS_HEADER}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataFormatError(f"{path}: line {line_no}: expected 5 columns")
            frame_ids.append(_parse_int(row[0], path, line_no))
            times.append(_parse_float(row[1], path, line_no))
            land_ids.append(_parse_int(row[2], path, line_no))
            us.append(_parse_float(row[3], path, line_no))
            vs.append(_parse_float(row[4], path, line_no))
    obs = ObservationSet(
        frame_ids=np.asarray(frame_ids, dtype=int),
        frame_times=np.asarray(times, dtype=float),
        landmark_ids=np.asarray(land_ids, dtype=int),
        pixels=np.column_stack([us, vs]) if us else np.zeros((0, 2)),
    )
    _check_frame_times(obs, path)
    return obs


def _check_frame_times(obs, path):
    if len(obs) == 0:
        return
    ids, first = np.unique(obs.frame_ids, return_index=True)
    times = obs.frame_times[first]
    if np.any(np.diff(times) <= 0):
        raise DataFormatError(f"{path}: frame timestamps must be strictly increasing")


def write_imu(path, stream: ImuStream):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(IMU_HEADER)
        for i in range(len(stream)):
            w.writerow([_fmt(stream.times[i])]
                       + [_fmt(x) for x in stream.gyro[i]]
                       + [_fmt(x) for x in stream.accel[i]])


def read_imu(path) -> ImuStream:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != IMU_HEADER:
            raise DataFormatError(f"{path}: expected header {IMU_HEADER}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise DataFormatError(f"{path}: line {line_no}: expected 7 columns")
            rows.append([_parse_float(tok, path, line_no) for tok in row])
    arr = np.asarray(rows, dtype=float) if rows else np.zeros((0, 7))
    if arr.shape[0] and np.any(np.diff(arr[:, 0]) <= 0):
        raise DataFormatError(f"{path}: IMU timestamps must be strictly increasing")
    return ImuStream(times=arr[:, 0], gyro=arr[:, 1:4], accel=arr[:, 4:7])


# ------------------------------------------------------------------ YAML I/O

def _dump_yaml(path, data):
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)


def _load_yaml(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise DataFormatError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: expected a mapping at top level")
    return data


def _require(data, key, path):
    if key not in data:
        raise DataFormatError(f"{path}: missing required field {key!r}")
    return data[key]


def _matrix(data, key, path, shape):
    m = np.asarray(_require(data, key, path), dtype=float)
    if m.shape != shape:
        raise DataFormatError(f"{path}: field {key!r} must have shape {shape}")
    return m


def write_intrinsics(path, intr: cam.Intrinsics, timestamp_convention=cam.FIRST_ROW):
    _dump_yaml(path, {
        "fu": float(intr.fu), "fv": float(intr.fv),
        "cu": float(intr.cu), "cv": float(intr.cv),
        "k1": float(intr.k1), "k2": float(intr.k2),
        "k3": float(intr.k3), "k4": float(intr.k4),
        "width": int(intr.width), "height": int(intr.height),
        "timestamp_convention": timestamp_convention,
    })


def read_intrinsics(path):
    """Returns (Intrinsics, timestamp_convention)."""
    d = _load_yaml(path)
    try:
        intr = cam.Intrinsics(
            fu=float(_require(d, "fu", path)), fv=float(_require(d, "fv", path)),
            cu=float(_require(d, "cu", path)), cv=float(_require(d, "cv", path)),
            k1=float(d.get("k1", 0.0)), k2=float(d.get("k2", 0.0)),
            k3=float(d.get("k3", 0.0)), k4=float(d.get("k4", 0.0)),
            width=int(_require(d, "width", path)),
            height=int(_require(d, "height", path)))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    convention = d.get("timestamp_convention", cam.FIRST_ROW)
    if convention not in (cam.FIRST_ROW, cam.CENTRAL_ROW):
        raise DataFormatError(f"{path}: unknown timestamp_convention {convention!r}")
    return intr, convention


def write_target(path, spec: TargetSpec):
    _dump_yaml(path, {"rows": spec.rows, "cols": spec.cols,
                      "tag_size": float(spec.tag_size),
                      "spacing_ratio": float(spec.spacing_ratio)})


def read_target(path) -> TargetSpec:
    d = _load_yaml(path)
    try:
        return TargetSpec(rows=int(_require(d, "rows", path)),
                          cols=int(_require(d, "cols", path)),
                          tag_size=float(_require(d, "tag_size", path)),
                          spacing_ratio=float(d.get("spacing_ratio", 0.3)))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def write_imu_noise(path, noise: ImuNoise, model=CALIBRATED):
    _dump_yaml(path, {
        "sigma_a": float(noise.sigma_a), "sigma_ba": float(noise.sigma_ba),
        "sigma_g": float(noise.sigma_g), "sigma_bg": float(noise.sigma_bg),
        "rate_hz": float(noise.rate_hz), "model": model,
    })


def read_imu_noise(path):
    """Returns (ImuNoise, model)."""
    d = _load_yaml(path)
    try:
        noise = ImuNoise(sigma_a=float(_require(d, "sigma_a", path)),
                         sigma_ba=float(_require(d, "sigma_ba", path)),
                         sigma_g=float(_require(d, "sigma_g", path)),
                         sigma_bg=float(_require(d, "sigma_bg", path)),
                         rate_hz=float(_require(d, "rate_hz", path)))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    model = d.get("model", CALIBRATED)
    if model not in (CALIBRATED, SCALE_MISALIGNMENT):
        raise DataFormatError(f"{path}: unknown IMU model {model!r}")
    return noise, model


_CONFIG_FIELDS = ("spline_order", "pose_knot_rate_hz", "bias_knot_rate_hz",
                  "imu_model", "sigma_c", "max_iterations", "function_tolerance",
                  "parameter_tolerance", "estimate_line_delay",
                  "estimate_time_offset", "timestamp_convention", "huber",
                  "gravity_magnitude", "initial_line_delay",
                  "initial_time_offset", "domain_margin")


def write_calibration_config(path, config: CalibrationConfig):
    data = {}
    for name in _CONFIG_FIELDS:
        v = getattr(config, name)
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        data[name] = v
    _dump_yaml(path, data)


def read_calibration_config(path) -> CalibrationConfig:
    d = _load_yaml(path)
    unknown = set(d) - set(_CONFIG_FIELDS)
    if unknown:
        raise DataFormatError(f"{path}: unknown config fields {sorted(unknown)}")
    try:
        return CalibrationConfig(**d)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def write_extrinsics(path, T: RigidTransform):
    _dump_yaml(path, {"rotation": [[float(x) for x in row] for row in T.rotation],
                      "translation": [float(x) for x in T.translation]})


def read_extrinsics(path) -> RigidTransform:
    d = _load_yaml(path)
    return RigidTransform(_matrix(d, "rotation", path, (3, 3)),
                          _matrix(d, "translation", path, (3,)))


# ----------------------------------------------------- report / ground truth

def _parameters_dict(T_CI, t_IC, line_delay, gravity, imu_model, M_a, M_g, M_s):
    return {
        "T_CI": {
            "rotation": [[float(x) for x in row] for row in T_CI.rotation],
            "translation": [float(x) for x in T_CI.translation],
        },
        "t_IC": float(t_IC),
        "line_delay": float(line_delay),
        "gravity_direction": [float(x) for x in gravity.direction],
        "gravity_magnitude": float(gravity.magnitude),
        "imu_model": imu_model,
        "M_a": [[float(x) for x in row] for row in M_a],
        "M_g": [[float(x) for x in row] for row in M_g],
        "M_s": [[float(x) for x in row] for row in M_s],
    }


def write_ground_truth(path, truth: dict):
    data = _parameters_dict(
        truth["T_CI"], truth["t_IC"], truth["line_delay"],
        GravityState(truth["gravity_direction"], truth["gravity_magnitude"]),
        truth["imu_model"], truth["M_a"], truth["M_g"], truth["M_s"])
    noise = truth.get("imu_noise")
    if noise is not None:
        data["imu_noise"] = {
            "sigma_a": float(noise.sigma_a), "sigma_ba": float(noise.sigma_ba),
            "sigma_g": float(noise.sigma_g), "sigma_bg": float(noise.sigma_bg),
            "rate_hz": float(noise.rate_hz)}
    data["sigma_c"] = float(truth.get("sigma_c", 1.0))
    data["rng_seed"] = int(truth.get("rng_seed", 0))
    data["timestamp_convention"] = truth.get("timestamp_convention", cam.FIRST_ROW)
    _dump_yaml(path, data)


def write_report(path, report: CalibrationReport):
    p = report.parameters
    data = _parameters_dict(p.T_CI, p.t_IC, p.line_delay, p.gravity,
                            p.imu_intrinsics.model, p.imu_intrinsics.M_a,
                            p.imu_intrinsics.M_g, p.imu_intrinsics.M_s)
    data["solver"] = {
        "iterations": int(report.iterations),
        "initial_cost": float(report.initial_cost),
        "final_cost": float(report.final_cost),
        "termination": report.termination,
        "converged": bool(report.converged),
        "dropped_reprojection": int(report.dropped_reprojection),
        "dropped_behind_camera": int(report.dropped_behind_camera),
        "dropped_imu_samples": int(report.dropped_imu_samples),
    }
    if report.time_offset_warning:
        data["solver"]["time_offset_warning"] = report.time_offset_warning
    data["residual_stats"] = {
        name: {"count": int(s.count), "median_whitened": float(s.median),
               "rms_whitened": float(s.rms),
               "median_unwhitened": float(s.median_unwhitened),
               "rms_unwhitened": float(s.rms_unwhitened)}
        for name, s in report.stats.items()}
    data["median_reprojection_px"] = float(report.median_reprojection_px)
    _dump_yaml(path, data)


class ReferenceParameters:
    """Parameter bundle read back from a report or ground-truth file."""

    def __init__(self, data, path):
        tci = _require(data, "T_CI", path)
        self.T_CI = RigidTransform(_matrix(tci, "rotation", path, (3, 3)),
                                   _matrix(tci, "translation", path, (3,)))
        self.t_IC = float(_require(data, "t_IC", path))
        self.line_delay = float(_require(data, "line_delay", path))
        self.gravity_direction = np.asarray(
            data.get("gravity_direction", [0.0, 0.0, -1.0]), dtype=float)
        self.imu_model = data.get("imu_model", CALIBRATED)
        self.M_a = np.asarray(data.get("M_a", np.eye(3).tolist()), dtype=float)
        self.M_g = np.asarray(data.get("M_g", np.eye(3).tolist()), dtype=float)
        self.M_s = np.asarray(data.get("M_s", np.zeros((3, 3)).tolist()), dtype=float)
        self.median_reprojection_px = data.get("median_reprojection_px")
        self.raw = data


def read_parameters(path) -> ReferenceParameters:
    return ReferenceParameters(_load_yaml(path), path)


def write_report_summary_csv(path, report: CalibrationReport):
    """Flat name,value table of the estimated parameters."""
    p = report.parameters
    rows = []
    for i in range(3):
        for j in range(3):
            rows.append((f"R_CI_{i}{j}", p.T_CI.rotation[i, j]))
    for i, name in enumerate(("x", "y", "z")):
        rows.append((f"p_CI_{name}", p.T_CI.translation[i]))
    rows.append(("t_IC", p.t_IC))
    rows.append(("line_delay", p.line_delay))
    for i, name in enumerate(("x", "y", "z")):
        rows.append((f"gravity_{name}", p.gravity.direction[i] * p.gravity.magnitude))
    if p.imu_intrinsics.model == SCALE_MISALIGNMENT:
        for label, M in (("M_a", p.imu_intrinsics.M_a),
                         ("M_g", p.imu_intrinsics.M_g),
                         ("M_s", p.imu_intrinsics.M_s)):
            for i in range(3):
                for j in range(3):
                    rows.append((f"{label}_{i}{j}", M[i, j]))
    rows.append(("median_reprojection_px", report.median_reprojection_px))
    rows.append(("final_cost", report.final_cost))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "value"])
        for name, value in rows:
            w.writerow([name, _fmt(value)])


def write_error_summary_csv(path, rows):
    """rows: list of (label, ErrorSummary)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "rotation_deg", "translation_m", "time_offset_ms",
                    "line_delay_us", "median_reprojection_px"])
        for label, s in rows:
            w.writerow([label, _fmt(s.rotation_deg), _fmt(s.translation_m),
                        _fmt(s.time_offset_s * 1e3), _fmt(s.line_delay_s * 1e6),
                        "" if s.median_reprojection_px is None
                        else _fmt(s.median_reprojection_px)])


def write_allan_curve_csv(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tau_s", "adev"])
        for tau, a in zip(curve.taus, curve.adev):
            w.writerow([_fmt(tau), _fmt(a)])


def write_allan_table(path, estimates: dict):
    """estimates: mapping channel name -> NoiseEstimate; adds a mean row.

    Missing values are written as 'X', matching the usual presentation of
    absent Allan regions.
    """
    names = list(estimates)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["channel", "white_noise", "bias_stability", "random_walk"])

        def cell(v):
            return "X" if v is None else _fmt(v)

        for name in names:
            e = estimates[name]
            w.writerow([name, cell(e.white_density), cell(e.bias_stability),
                        cell(e.random_walk_density)])
        for group in ("accel", "gyro"):
            sub = [estimates[n] for n in names if n.startswith(group)]
            if not sub:
                continue
            mean = NoiseEstimate()
            for fieldname in ("white_density", "bias_stability",
                              "random_walk_density"):
                vals = [getattr(e, fieldname) for e in sub
                        if getattr(e, fieldname) is not None]
                if vals:
                    setattr(mean, fieldname, float(np.mean(vals)))
            w.writerow([f"{group}_mean", cell(mean.white_density),
                        cell(mean.bias_stability), cell(mean.random_walk_density)])
