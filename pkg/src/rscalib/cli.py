"""Command-line front end: simulate, calibrate, allan, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import camera as cam
from . import io as rio
from . import simulator as sim
from . import target as target_mod
from .allan import analyze_stream, default_taus
from .errors import (CalibrationError, DataFormatError, NumericalFailureError)
from .estimator import CalibrationConfig, calibrate, evaluate_report
from .geometry import RigidTransform
from .imu import CALIBRATED, SCALE_MISALIGNMENT, GravityState, ImuIntrinsics, ImuNoise

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

BLUEFOX_LINE_LENGTH = 1650
SWEEP_PIXEL_CLOCKS_MHZ = (12.0, 20.0, 32.0, 40.0)


def _build_parser():
    p = argparse.ArgumentParser(
        prog="rscalib",
        description="Rolling-shutter camera-IMU spatiotemporal calibration")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; 1 is the deterministic reference mode")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a synthetic dataset")
    ps.add_argument("--spec", help="simulation spec YAML (defaults used if omitted)")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--seed", type=int, default=None, help="override RNG seed")
    ps.add_argument("--line-delay-sweep", action="store_true",
                    help="emit four datasets at the reference pixel clocks "
                         "(12/20/32/40 MHz, 1650 px line length)")

    pc = sub.add_parser("calibrate", help="run the spatiotemporal calibration")
    pc.add_argument("--observations", required=True)
    pc.add_argument("--imu", required=True)
    pc.add_argument("--intrinsics", required=True)
    pc.add_argument("--target", required=True)
    pc.add_argument("--noise", required=True, help="IMU noise YAML")
    pc.add_argument("--config", help="calibration config YAML")
    pc.add_argument("--mode", choices=("rs", "gs"), default="rs",
                    help="gs freezes the line delay at zero")
    pc.add_argument("--imu-model", choices=(CALIBRATED, "scale_misalign"),
                    default=None, help="override the IMU error model")
    pc.add_argument("--initial-extrinsics",
                    help="YAML with a hand-measured camera-IMU transform")
    pc.add_argument("--out", required=True)

    pa = sub.add_parser("allan", help="Allan-variance noise identification")
    pa.add_argument("--imu", required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--rate", type=float, default=None,
                    help="sample rate; inferred from timestamps if omitted")

    pe = sub.add_parser("evaluate", help="compare a report against a reference")
    pe.add_argument("--report", required=True, action="append",
                    help="report YAML (repeatable)")
    pe.add_argument("--reference", required=True)
    pe.add_argument("--out", required=True, help="output CSV path")
    return p


def _load_sim_spec(path, seed_override):
    kwargs = {}
    if path is not None:
        data = rio._load_yaml(path)
        simple = {"duration", "frame_rate_hz", "imu_rate_hz", "line_delay",
                  "t_IC", "sigma_c", "rng_seed", "timestamp_convention"}
        for key in simple & set(data):
            kwargs[key] = data[key]
        if "T_CI" in data:
            kwargs["T_CI"] = RigidTransform(
                np.asarray(data["T_CI"]["rotation"], dtype=float),
                np.asarray(data["T_CI"]["translation"], dtype=float))
        if "gravity_direction" in data:
            kwargs["gravity"] = GravityState(
                np.asarray(data["gravity_direction"], dtype=float),
                float(data.get("gravity_magnitude", 9.80665)))
        if "imu_noise" in data:
            kwargs["imu_noise"] = ImuNoise(**{k: float(v) for k, v
                                              in data["imu_noise"].items()})
        if "target" in data:
            kwargs["target"] = target_mod.TargetSpec(**data["target"])
        if "intrinsics" in data:
            d = data["intrinsics"]
            kwargs["intrinsics"] = cam.Intrinsics(**d)
        if "imu_intrinsics" in data:
            d = data["imu_intrinsics"]
            kwargs["imu_intrinsics"] = ImuIntrinsics(
                model=d.get("model", CALIBRATED),
                M_a=np.asarray(d.get("M_a", np.eye(3).tolist()), dtype=float),
                M_g=np.asarray(d.get("M_g", np.eye(3).tolist()), dtype=float),
                M_s=np.asarray(d.get("M_s", np.zeros((3, 3)).tolist()), dtype=float))
        unknown = set(data) - simple - {"T_CI", "gravity_direction",
                                        "gravity_magnitude", "imu_noise",
                                        "target", "intrinsics", "imu_intrinsics",
                                        "trajectory"}
        if unknown:
            raise DataFormatError(f"{path}: unknown simulation fields {sorted(unknown)}")
        if "trajectory" in data and data["trajectory"] not in ("figure8",
                                                               "random_smooth"):
            raise DataFormatError(f"{path}: unknown trajectory {data['trajectory']!r}")
        if "trajectory" in data:
            kwargs["trajectory"] = sim.reference_trajectory(
                data["trajectory"], float(kwargs.get("duration", 50.0)),
                int(kwargs.get("rng_seed", 0)),
                T_CI=kwargs.get("T_CI"), intrinsics=kwargs.get("intrinsics"),
                target=kwargs.get("target"))
    if seed_override is not None:
        kwargs["rng_seed"] = seed_override
        kwargs.pop("trajectory", None)
    return sim.SimulationSpec(**kwargs)


def _write_dataset(out_dir: Path, spec: sim.SimulationSpec):
    out_dir.mkdir(parents=True, exist_ok=True)
    obs = sim.simulate_observations(spec)
    imu = sim.simulate_imu(spec)
    rio.write_observations(out_dir / "observations.csv", obs)
    rio.write_imu(out_dir / "imu.csv", imu)
    rio.write_ground_truth(out_dir / "ground_truth.yaml", sim.ground_truth(spec))
    rio.write_intrinsics(out_dir / "intrinsics.yaml", spec.intrinsics,
                         spec.timestamp_convention)
    rio.write_target(out_dir / "target.yaml", spec.target)
    rio.write_imu_noise(out_dir / "imu_noise.yaml", spec.imu_noise,
                        spec.imu_intrinsics.model)
    print(f"wrote {len(obs)} observations, {len(imu)} IMU samples to {out_dir}")


def cmd_simulate(args):
    spec = _load_sim_spec(args.spec, args.seed)
    out = Path(args.out)
    if args.line_delay_sweep:
        for clock_mhz in SWEEP_PIXEL_CLOCKS_MHZ:
            d = cam.line_delay_from_specs(BLUEFOX_LINE_LENGTH, clock_mhz * 1e6)
            sub = out / f"d{d * 1e6:.3f}us"
            spec_d = sim.SimulationSpec(
                duration=spec.duration, frame_rate_hz=spec.frame_rate_hz,
                imu_rate_hz=spec.imu_rate_hz, line_delay=d, t_IC=spec.t_IC,
                T_CI=spec.T_CI, gravity=spec.gravity, imu_noise=spec.imu_noise,
                imu_intrinsics=spec.imu_intrinsics, sigma_c=spec.sigma_c,
                target=spec.target, intrinsics=spec.intrinsics,
                trajectory=spec.trajectory, rng_seed=spec.rng_seed,
                timestamp_convention=spec.timestamp_convention)
            _write_dataset(sub, spec_d)
    else:
        _write_dataset(out, spec)
    return EXIT_OK


def cmd_calibrate(args):
    obs = rio.read_observations(args.observations)
    imu = rio.read_imu(args.imu)
    intrinsics, convention = rio.read_intrinsics(args.intrinsics)
    target = rio.read_target(args.target)
    noise, noise_model = rio.read_imu_noise(args.noise)
    if args.config:
        config = rio.read_calibration_config(args.config)
    else:
        config = CalibrationConfig.desk_scale()
    updates = {"timestamp_convention": convention}
    if args.imu_model is not None:
        updates["imu_model"] = (SCALE_MISALIGNMENT if args.imu_model
                                == "scale_misalign" else CALIBRATED)
    elif not args.config:
        updates["imu_model"] = noise_model
    if args.mode == "gs":
        updates["estimate_line_delay"] = False
        updates["initial_line_delay"] = 0.0
    from dataclasses import replace
    config = replace(config, **updates)

    initial_T_CI = None
    if args.initial_extrinsics:
        initial_T_CI = rio.read_extrinsics(args.initial_extrinsics)

    _, landmark_points = target_mod.landmarks(target)
    report = calibrate(obs, imu, intrinsics, landmark_points, config, noise,
                       initial_T_CI=initial_T_CI)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_report(out / "report.yaml", report)
    rio.write_report_summary_csv(out / "report_summary.csv", report)
    print(f"{args.mode}-mode calibration: {report.termination} after "
          f"{report.iterations} iterations, final cost {report.final_cost:.6e}")
    print(f"median reprojection error {report.median_reprojection_px:.3f} px")
    if not report.converged:
        print("warning: solver did not converge", file=sys.stderr)
    return EXIT_OK


def cmd_allan(args):
    imu = rio.read_imu(args.imu)
    if len(imu) < 2:
        raise DataFormatError(f"{args.imu}: too few samples")
    rate = args.rate or 1.0 / float(np.median(np.diff(imu.times)))
    duration = imu.times[-1] - imu.times[0]
    if duration < 3600.0:
        print(f"warning: only {duration / 60:.1f} min of data; at least an "
              "hour of static data is recommended, tau range restricted",
              file=sys.stderr)
    channels = np.hstack([imu.accel, imu.gyro])
    names = ["accel_x", "accel_y", "accel_z", "gyro_x", "gyro_y", "gyro_z"]
    taus = default_taus(len(imu), rate)
    curves, estimates = analyze_stream(channels, rate, taus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, curve in zip(names, curves):
        rio.write_allan_curve_csv(out / f"allan_{name}.csv", curve)
    rio.write_allan_table(out / "noise_parameters.csv",
                          dict(zip(names, estimates)))
    print(f"wrote Allan curves and noise table to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    reference = rio.read_parameters(args.reference)
    rows = []
    for path in args.report:
        rep = rio.read_parameters(path)
        summary = evaluate_report(_ReportAdapter(rep), reference)
        rows.append((Path(path).stem if len(args.report) > 1 else "report",
                     summary))
    rio.write_error_summary_csv(args.out, rows)
    for label, s in rows:
        print(f"{label}: rotation {s.rotation_deg:.4f} deg, translation "
              f"{s.translation_m * 1000:.2f} mm, time offset "
              f"{s.time_offset_s * 1e3:.3f} ms, line delay "
              f"{s.line_delay_s * 1e6:.3f} us")
    return EXIT_OK


class _ReportAdapter:
    """Present ReferenceParameters with the attributes evaluate_report needs."""

    def __init__(self, params):
        self.T_CI = params.T_CI
        self.t_IC = params.t_IC
        self.line_delay = params.line_delay
        self._median = params.median_reprojection_px

    @property
    def parameters(self):
        return self

    @property
    def median_reprojection_px(self):
        return self._median


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"simulate": cmd_simulate, "calibrate": cmd_calibrate,
                "allan": cmd_allan, "evaluate": cmd_evaluate}
    try:
        return handlers[args.command](args)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, CalibrationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
