"""Command-line entry point: ``securetrack {simulate,sweep,calibrate}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from securetrack import __version__
from securetrack.config import ConfigError, build_config, dump_toml, load_raw
from securetrack.detection import RunReport
from securetrack.harness import MetricRow, calibrate, run_sweep, run_trial, spearman_trend

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNOBSERVABLE = 3
EXIT_IO = 4

log = logging.getLogger("securetrack")


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> None:
    text = json.dumps(_clean(payload), indent=1, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def report_payload(report: RunReport, raw: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "config": raw,
        "seed": report.seed,
        "observable": report.observable,
        "mse_m2": report.mse,
        "live_anchors": report.live,
        "verdicts": [v.to_dict() for v in report.verdicts],
        "truth": report.truth.to_dict(),
        "estimate": {
            "state_order": ["x_m", "vx_mps", "y_m", "vy_mps"],
            "states": report.estimates,
            "sq_error_m2": report.sq_error,
        },
        "passes": [
            {
                "live": p.live,
                "verdict": p.verdict.to_dict() if p.verdict else None,
                "suppressed_flags": p.suppressed,
                "steps_run": p.steps_run,
                "delta_m": p.delta,
                "mahalanobis": p.maha,
            }
            for p in report.passes
        ],
    }


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


def cmd_simulate(cfg, args) -> int:
    report = run_trial(cfg.scenario, cfg.detector, cfg.seed, cfg.filt)
    out = _out_dir(cfg.out_dir) / "report.json"
    write_json(out, report_payload(report, cfg.raw))
    flagged = ", ".join(str(v.anchor_id) for v in report.verdicts) or "none"
    print(f"mse {report.mse:.4f} m^2, flagged anchors: {flagged}, "
          f"truly malicious: {np.flatnonzero(report.truth.malicious).tolist()}")
    print(f"wrote {out}")
    if not report.observable:
        log.error("anchor geometry is unobservable (fewer than %d non-collinear anchors)",
                  cfg.detector.min_anchors)
        return EXIT_UNOBSERVABLE
    return EXIT_OK


def sweep_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricRow.CSV_FIELDS)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def cmd_sweep(cfg, args) -> int:
    spec = cfg.sweep_spec()
    rows = run_sweep(spec, workers=cfg.workers)
    out = _out_dir(cfg.out_dir)
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8", newline="\n")
    td = [r.true_detection_rate for r in rows]
    trends = {}
    if len(rows) > 1:
        trends["mse_spearman"] = spearman_trend(spec.values, [r.mse for r in rows])
        if all(t is not None for t in td):
            trends["true_detection_spearman"] = spearman_trend(spec.values, td)
    write_json(out / "sweep_manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "command": "sweep",
        "config": cfg.raw,
        "axis": spec.axis.value,
        "values": list(spec.values),
        "trials": spec.trials,
        "root_seed": spec.seed,
        "trial_seeds": spec.trial_seeds(),
        "mean_runtime_s": {str(r.value): r.mean_runtime_s for r in rows},
        "trends": trends,
    })
    for r in rows:
        tdr = "n/a" if r.true_detection_rate is None else f"{r.true_detection_rate:.3f}"
        print(f"{spec.axis.value}={r.value}: true {tdr}, "
              f"false {r.false_detection_rate:.3f}, mse {r.mse:.3f} m^2")
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_calibrate(cfg, args) -> int:
    if cfg.scenario.n_malicious > 0:
        raise ConfigError("calibration needs an attack-free scenario (set it to 0)",
                          "scenario.n_malicious")
    cal = calibrate(cfg.scenario, trials=cfg.calibration_trials, percentile=cfg.calibration_percentile,
                    seed=cfg.seed, detector=cfg.detector, filt=cfg.filt, workers=cfg.workers)
    fragment = {
        "detector": {"gamma": cal.gamma, "maha_margin": cal.maha_margin},
        "calibration": {"percentile": cal.percentile, "trials": cal.trials},
    }
    out = _out_dir(cfg.out_dir) / "calibration.toml"
    header = (f"# seed {cal.seed}, {cal.samples_delta} delta and "
              f"{cal.samples_maha} mahalanobis step samples\n")
    out.write_text(header + dump_toml(fragment), encoding="utf-8", newline="\n")
    print(f"gamma {cal.gamma:.4f}, maha_margin {cal.maha_margin:.4f} "
          f"({cal.percentile}th percentile, {cal.trials} trials)")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "calibrate": cmd_calibrate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="securetrack",
                                description="EKF tracking with malicious-anchor detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("simulate", "run one seeded scenario and write report.json"),
                        ("sweep", "Monte-Carlo sweep over one axis; writes sweep.csv"),
                        ("calibrate", "estimate gamma and maha_margin from attack-free runs")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="TOML config file")
        sp.add_argument("--seed", type=int, help="run.seed")
        sp.add_argument("--detector", choices=["delta", "mahalanobis"], help="detector.mode")
        sp.add_argument("--out", type=Path, help="run.out_dir")
        sp.add_argument("--trials", type=int,
                        help="run.trials (calibration.trials for calibrate)")
        sp.add_argument("--workers", type=int, help="run.workers")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override any config key")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _flag_overrides(args) -> list[str]:
    out = []
    if args.seed is not None:
        out.append(f"run.seed={args.seed}")
    if args.detector is not None:
        out.append(f'detector.mode="{args.detector}"')
    if args.out is not None:
        out.append(f"run.out_dir={json.dumps(str(args.out))}")
    if args.trials is not None:
        key = "calibration.trials" if args.command == "calibrate" else "run.trials"
        out.append(f"{key}={args.trials}")
    if args.workers is not None:
        out.append(f"run.workers={args.workers}")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # Explicit flags win over --set, which wins over the file.
        raw, text, source = load_raw(args.config, [*args.overrides, *_flag_overrides(args)])
        cfg = build_config(raw, text, source)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
