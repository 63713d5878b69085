"""Command-line pipeline: synth -> calibrate -> evaluate -> coop -> sweep.

Every command is deterministic given its config and seed.  Exit codes:
0 success, 2 configuration or usage error, 3 numeric failure (diverged
solver or corrupted artifact).  ``--json`` switches stdout to a single
machine-readable JSON document.  Angles are degrees and power is dBm on
this surface.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import presets
from .arrays import BeamformingAngles, ideal_codebook
from .calibration import (
    CalibrationDivergedError,
    SolverConfig,
    anchor_indices_for,
    calibrate,
    loss_trace_oscillates,
    normalized_ideal_codebook,
)
from .cooperative import FusionWeights, run_rounds, split_measurements
from .metrics import (
    EvaluationAngleSet,
    MetricReport,
    default_eval_set_2d,
    default_eval_set_3d,
    evaluate_codebook,
)
from .storage import (
    StorageError,
    data_dir,
    load_codebook,
    load_measurements,
    load_state,
    save_codebook,
    save_measurements,
    save_state,
    write_metric_reports_csv,
)
from .synth import generate_measurements

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _emit(report: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report, indent=1, default=str))
    else:
        for key, value in report.items():
            print(f"{key}: {value}")


def _eval_set_for(geom) -> EvaluationAngleSet:
    return default_eval_set_3d() if geom.rows > 1 else default_eval_set_2d()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    overrides = dict(_load_toml(args.config).get("scenario", {}))
    if args.zero_noise:
        if args.preset == "mpc-line":
            overrides["with_noise"] = False
        else:
            overrides["target_snr_db"] = None
    scenario = presets.scenario_from_preset(args.preset, seed=args.seed, **overrides)
    measurements = generate_measurements(scenario)

    out = Path(args.out_dir)
    encoding = "binary" if args.binary else "csv"
    suffix = ".bin" if args.binary else ".csv"
    angle_pairs = scenario.nominal_angles.as_degree_pairs()
    echo = {
        "preset": args.preset,
        "seed": args.seed,
        "overrides": overrides,
        "tx_power_dbm": scenario.tx_power_dbm,
        "carrier_wavelength_m": scenario.carrier_wavelength,
        "noise_variance_w": scenario.noise_variance,
        "subcarriers": scenario.subcarriers,
        "subcarrier_spacing_hz": scenario.subcarrier_spacing,
        "target_snr_db": scenario.target_snr_db,
        "element_beta": scenario.element_beta,
        "n_scatterers": len(scenario.scatterers),
        "nominal_beam_angles_deg": [list(p) for p in angle_pairs],
    }
    save_measurements(out / f"measurements{suffix}", measurements, encoding, {"scenario": echo})
    save_codebook(
        out / f"true_codebook{suffix}", scenario.true_codebook, scenario.geom,
        angle_pairs, scenario.rng_seed, encoding,
    )
    save_codebook(
        out / f"nominal_codebook{suffix}", ideal_codebook(scenario.geom, scenario.nominal_angles),
        scenario.geom, angle_pairs, scenario.rng_seed, encoding,
    )
    (out / "scenario.json").write_text(json.dumps(echo, indent=1))
    _emit(
        {
            "out_dir": str(out),
            "samples": measurements.n_samples,
            "codewords": measurements.n_codewords,
            "median_snr_db": float(np.median(measurements.snr_db)),
            "encoding": encoding,
        },
        args.json,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def _resolve_in_dir(in_path: str) -> Path:
    """--in accepts the synth output directory or the measurements payload."""
    path = Path(in_path)
    return path.parent if path.is_file() else path


def _nominal_angles_from_dir(in_dir: Path) -> BeamformingAngles:
    scenario = json.loads((in_dir / "scenario.json").read_text())
    return BeamformingAngles.from_degrees(
        [tuple(p) for p in scenario["nominal_beam_angles_deg"]]
    )


def _find_measurements(in_dir: Path):
    for name in ("measurements.csv", "measurements.bin"):
        if (in_dir / name).exists():
            return load_measurements(in_dir / name)
    raise FileNotFoundError(f"no measurements payload found in {in_dir}")


def _default_rates(geom) -> dict:
    """Stock learning rates; planar (az-el) sweeps need larger steps."""
    if geom.rows > 1:
        return {"ao": 0.1, "gd-rel": 0.1, "gd-ael": 0.2}
    return {"ao": 0.02, "gd-rel": 0.02, "gd-ael": 0.03}


def _solver_config(args, measurements, cfg_file: dict) -> SolverConfig:
    solver = dict(cfg_file.get("solver", {}))
    method = args.method or solver.pop("method", "gd-rel")
    defaults_lr = _default_rates(measurements.geom)
    config = SolverConfig(
        method=method,
        learning_rate=float(solver.pop("learning_rate", defaults_lr[method])),
        batch_size=solver.pop("batch_size", None),
        max_iters=solver.pop("max_iters", None),
        seed=int(solver.pop("seed", args.seed)),
        convergence_tol=float(solver.pop("convergence_tol", 1e-8)),
        convergence_patience=int(solver.pop("convergence_patience", 20)),
    )
    if solver:
        raise ValueError(f"unknown solver config keys: {sorted(solver)}")
    if config.method == "gd-ael":
        config.anchor_indices = anchor_indices_for(
            measurements, _eval_set_for(measurements.geom)
        )
    return config


def _cmd_calibrate(args) -> int:
    in_dir = _resolve_in_dir(args.in_dir)
    measurements = _find_measurements(in_dir)
    nominal = _nominal_angles_from_dir(in_dir)
    cfg_file = _load_toml(args.config)
    config = _solver_config(args, measurements, cfg_file)

    init = load_state(args.init) if args.init else None
    if args.model == "m4" and config.method == "gd-ael" and init is None:
        # The projection-matching refinement starts from a residual fit.
        rel_cfg = SolverConfig(
            method="gd-rel", learning_rate=0.02, seed=config.seed,
            batch_size=config.batch_size, max_iters=config.max_iters,
        )
        init = calibrate(measurements, "m4", rel_cfg, nominal_angles=nominal)
    state = calibrate(measurements, args.model, config, init=init, nominal_angles=nominal)
    provenance = {"config_file": dict(cfg_file), "cli": {
        "model": args.model, "method": config.method, "seed": config.seed,
        "learning_rate": config.learning_rate, "batch_size": config.batch_size,
        "max_iters": config.resolved_max_iters(), "in_dir": str(in_dir),
    }}
    save_state(args.out, state, provenance=provenance)
    _emit(
        {
            "model": state.model,
            "method": state.method,
            "iterations": state.loss_trace[-1][0],
            "final_loss": state.final_loss(),
            "oscillating": loss_trace_oscillates(state.loss_trace),
            "state": args.out,
        },
        args.json,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _truth_context(in_dir: Path):
    for name in ("true_codebook.csv", "true_codebook.bin"):
        if (in_dir / name).exists():
            truth, _ = load_codebook(in_dir / name)
            break
    else:
        raise FileNotFoundError(f"no true codebook found in {in_dir}")
    measurements = _find_measurements(in_dir)
    nominal = _nominal_angles_from_dir(in_dir)
    ideal = ideal_codebook(measurements.geom, nominal)
    return measurements, truth, ideal, nominal


def _cmd_evaluate(args) -> int:
    in_dir = _resolve_in_dir(args.in_dir)
    measurements, truth, ideal, nominal = _truth_context(in_dir)
    eval_set = _eval_set_for(measurements.geom)
    reports: list[MetricReport] = []

    for spec in args.models.split(",") if args.models else []:
        spec = spec.strip()
        if not spec:
            continue
        model, _, method = spec.partition(":")
        if model not in ("m1", "m2", "m3", "m4"):
            raise ValueError(f"unknown model {spec!r}")
        if model == "m4":
            method = method or "gd-rel"
            rates = _default_rates(measurements.geom)
            config = SolverConfig(method=method, learning_rate=rates[method], seed=args.seed)
            if method == "gd-ael":
                config.anchor_indices = anchor_indices_for(measurements, eval_set)
                rel_state = calibrate(
                    measurements, "m4",
                    SolverConfig(method="gd-rel", learning_rate=rates["gd-rel"],
                                 seed=args.seed),
                    nominal_angles=nominal,
                )
                state = calibrate(measurements, "m4", config, init=rel_state)
            else:
                state = calibrate(measurements, "m4", config, nominal_angles=nominal)
        else:
            state = calibrate(measurements, model, SolverConfig(seed=args.seed),
                              nominal_angles=nominal)
        reports.append(
            evaluate_codebook(
                state.codebook, measurements.geom, truth, ideal, eval_set,
                model=model, method=state.method,
            )
        )

    for path in args.state or []:
        state = load_state(path)
        reports.append(
            evaluate_codebook(
                state.codebook, measurements.geom, truth, ideal, eval_set,
                model=state.model, method=state.method,
            )
        )

    if not reports:
        raise ValueError("nothing to evaluate: pass --models and/or --state")
    metric_fields = {
        "all": None,
        "angle-bias": ("angle_error_rms_deg",),
        "similarity": ("response_similarity",),
        "gain-loss": ("gain_loss_db",),
    }[args.metric]
    rows = []
    for r in reports:
        d = r.as_dict()
        if metric_fields is not None:
            d = {k: d[k] for k in ("model", "method", *metric_fields)}
        rows.append(d)
    if args.out:
        if metric_fields is None:
            write_metric_reports_csv(args.out, reports)
        else:
            keys = list(rows[0])
            lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in rows]
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text("\n".join(lines) + "\n")
    payload = {"reports": rows, "out": args.out}
    if args.json:
        print(json.dumps(payload, indent=1))
    elif metric_fields is None:
        print(MetricReport.csv_header())
        for r in reports:
            print(r.csv_row())
    else:
        keys = list(rows[0])
        print(",".join(keys))
        for r in rows:
            print(",".join(str(r[k]) for k in keys))
    return EXIT_OK


# ---------------------------------------------------------------------------
# coop
# ---------------------------------------------------------------------------


def _cmd_coop(args) -> int:
    in_dir = _resolve_in_dir(args.in_dir)
    measurements, truth, ideal, nominal = _truth_context(in_dir)
    eval_set = _eval_set_for(measurements.geom)
    sizes = [int(s) for s in args.split.split(",")] if args.split else None
    if sizes is None:
        base = measurements.n_samples // args.ues
        sizes = [base] * (args.ues - 1) + [measurements.n_samples - base * (args.ues - 1)]
    if len(sizes) != args.ues:
        raise ValueError("--split must list one size per UE")
    parts = split_measurements(measurements, sizes, seed=args.seed)

    if args.weights == "equal":
        weights = FusionWeights.equal(args.ues)
    elif args.weights == "gain":
        weights = None  # resolved after the first round below
    else:
        weights = FusionWeights([float(x) for x in args.weights.split(",")])

    local_cfg = SolverConfig(
        method="gd-rel", learning_rate=0.02, seed=args.seed, max_iters=args.local_iters
    )
    init_cb = normalized_ideal_codebook(measurements.geom, nominal)

    def metric_hook(cb):
        report = evaluate_codebook(cb, measurements.geom, truth, ideal, eval_set)
        return {
            "angle_error_rms_deg": report.angle_error_rms_deg,
            "response_similarity": report.response_similarity,
        }

    if weights is None:
        # One probe round to size gain-proportional weights.
        from .cooperative import local_delta

        probe = [local_delta(init_cb, ms, local_cfg, ue_id=i) for i, ms in enumerate(parts)]
        weights = FusionWeights.gain_proportional(probe)

    history = run_rounds(
        parts, init_cb, args.rounds, weights=weights,
        local_config=local_cfg, metric_hook=metric_hook,
    )

    lines = ["round,uplink_entries,total_uplink_entries,angle_error_rms_deg,response_similarity"]
    total = 0
    rows = []
    for entry in history.rounds:
        total += entry.uplink_entries
        row = {
            "round": entry.round_index,
            "uplink_entries": entry.uplink_entries,
            "total_uplink_entries": total,
            **entry.metrics,
        }
        rows.append(row)
        lines.append(
            f"{row['round']},{row['uplink_entries']},{row['total_uplink_entries']},"
            f"{row['angle_error_rms_deg']:.6f},{row['response_similarity']:.6f}"
        )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n")
    payload = {
        "rounds": rows,
        "weights": weights.xi.tolist(),
        "centralized_baseline_entries": history.centralized_baseline_entries,
        "out": args.out,
    }
    if args.json:
        print(json.dumps(payload, indent=1))
    else:
        print("\n".join(lines))
        print(f"centralized baseline entries: {history.centralized_baseline_entries}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_rows(args, measurements, nominal, truth, ideal, eval_set):
    rows = []

    def run_rel(lr, batch):
        config = SolverConfig(
            method="gd-rel", learning_rate=lr, batch_size=batch,
            seed=args.seed, max_iters=args.max_iters,
        )
        state = calibrate(measurements, "m4", config, nominal_angles=nominal)
        report = evaluate_codebook(state.codebook, measurements.geom, truth, ideal, eval_set)
        return state, report

    if args.axis == "learning_rate":
        for value in args.values:
            state, report = run_rel(float(value), args.batch_size)
            rows.append({
                "axis": "learning_rate", "value": float(value),
                "final_loss": state.final_loss(),
                "angle_error_rms_deg": report.angle_error_rms_deg,
                "oscillating": loss_trace_oscillates(state.loss_trace),
            })
    elif args.axis == "batch_size":
        for value in args.values:
            batch = None if value in ("full", "none") else int(value)
            state, report = run_rel(args.learning_rate, batch)
            rows.append({
                "axis": "batch_size", "value": value,
                "final_loss": state.final_loss(),
                "angle_error_rms_deg": report.angle_error_rms_deg,
                "oscillating": loss_trace_oscillates(state.loss_trace),
            })
    elif args.axis == "tx_power":
        for value in args.values:
            scenario = presets.scenario_from_preset(
                args.preset, seed=args.seed, tx_power_dbm=float(value)
            )
            ms = generate_measurements(scenario)
            config = SolverConfig(
                method="gd-rel", learning_rate=args.learning_rate,
                seed=args.seed, max_iters=args.max_iters,
            )
            state = calibrate(ms, "m4", config, nominal_angles=scenario.nominal_angles)
            ev = _eval_set_for(scenario.geom)
            report = evaluate_codebook(
                state.codebook, scenario.geom, scenario.true_codebook,
                ideal_codebook(scenario.geom, scenario.nominal_angles), ev,
            )
            rows.append({
                "axis": "tx_power", "value": float(value),
                "median_snr_db": float(np.median(ms.snr_db)),
                "final_loss": state.final_loss(),
                "angle_error_rms_deg": report.angle_error_rms_deg,
                "oscillating": loss_trace_oscillates(state.loss_trace),
            })
    elif args.axis == "weights":
        sizes = [int(s) for s in (args.split or "100,200,261").split(",")]
        parts = split_measurements(measurements, sizes, seed=args.seed)
        init_cb = normalized_ideal_codebook(measurements.geom, nominal)
        local_cfg = SolverConfig(
            method="gd-rel", learning_rate=0.02, seed=args.seed, max_iters=args.local_iters
        )
        for v2 in args.values:
            for v3 in args.values:
                weights = FusionWeights(np.array([1.0, float(v2), float(v3)]))
                history = run_rounds(parts, init_cb, args.rounds, weights, local_cfg)
                report = evaluate_codebook(
                    history.final_codebook(), measurements.geom, truth, ideal, eval_set
                )
                rows.append({
                    "axis": "weights", "value": f"{v2}:{v3}",
                    "xi2": float(v2), "xi3": float(v3),
                    "angle_error_rms_deg": report.angle_error_rms_deg,
                })
    else:
        raise ValueError(f"unknown sweep axis {args.axis!r}")
    return rows


def _cmd_sweep(args) -> int:
    in_dir = _resolve_in_dir(args.in_dir)
    measurements, truth, ideal, nominal = _truth_context(in_dir)
    eval_set = _eval_set_for(measurements.geom)
    rows = _sweep_rows(args, measurements, nominal, truth, ideal, eval_set)
    if not rows:
        raise ValueError("sweep produced no rows; pass --values")
    keys = sorted({k for row in rows for k in row})
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(str(row.get(k, "")) for k in keys))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n")
    if args.json:
        print(json.dumps({"rows": rows, "out": args.out}, indent=1))
    else:
        print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beamcal",
        description="Beam pattern calibration pipeline over synthetic pilot measurements.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("synth", help="generate a synthetic measurement campaign")
    common(p)
    p.add_argument("--preset", choices=presets.PRESET_NAMES, default="2d-sweep")
    p.add_argument("--config", help="TOML file with a [scenario] table of overrides")
    p.add_argument("--out-dir", default=str(data_dir()))
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--binary", action="store_true", help="binary payloads instead of CSV")

    p = sub.add_parser("calibrate", help="fit a calibration model to measurements")
    common(p)
    p.add_argument("--model", choices=("m1", "m2", "m3", "m4"), required=True)
    p.add_argument("--method", choices=("ao", "gd-rel", "gd-ael"))
    p.add_argument("--config", help="TOML file with a [solver] table")
    p.add_argument("--init", help="warm-start state JSON")
    p.add_argument("--in", dest="in_dir", required=True, help="synth output directory")
    p.add_argument("--out", required=True, help="state JSON destination")

    p = sub.add_parser("evaluate", help="score calibrations against ground truth")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--models", help="comma list, e.g. m1,m2,m4:ao,m4:gd-rel,m4:gd-ael")
    p.add_argument("--state", action="append", help="state JSON to score (repeatable)")
    p.add_argument("--metric", choices=("all", "angle-bias", "similarity", "gain-loss"),
                   default="all")
    p.add_argument("--out", help="CSV destination")

    p = sub.add_parser("coop", help="federated multi-UE calibration")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--ues", type=int, default=3)
    p.add_argument("--split", help="comma sample counts per UE, e.g. 100,200,261")
    p.add_argument("--weights", default="equal", help="'equal', 'gain', or comma list")
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--local-iters", type=int, default=100)
    p.add_argument("--out", help="per-round metrics CSV")

    p = sub.add_parser("sweep", help="hyperparameter / power / weight sweeps")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--axis", choices=("learning_rate", "batch_size", "tx_power", "weights"),
                   required=True)
    p.add_argument("--values", nargs="+", default=[])
    p.add_argument("--preset", choices=presets.PRESET_NAMES, default="mpc-line",
                   help="scenario regenerated per point for tx_power sweeps")
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--split", help="per-UE sizes for weight sweeps")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--local-iters", type=int, default=100)
    p.add_argument("--out", help="CSV destination")
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate,
    "coop": _cmd_coop,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationDivergedError, StorageError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
