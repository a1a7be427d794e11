"""Command-line entry point.

Subcommands: run (full experiment from a JSON config), synth (generate a
household CSV), evaluate (Monte Carlo re-evaluation of fixed set-points),
timeseries (per-minute violation tables from a finished run). Exit codes:
0 success, 2 configuration problem, 3 solver failure, 4 infeasible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .chance import evaluate
from .driver import TuningDegenerate
from .experiment import (
    ConfigError,
    ExperimentConfig,
    RunReport,
    emit_timeseries,
    resolve_feeder_path,
    run_experiment,
)
from .feeder import FeederError, assemble_admittance, load_feeder
from .opf import Infeasible, operating_point_at
from .powerflow import NonConvergence, SingularJacobian
from .scenario import ScenarioError, load_timeseries, save_timeseries, synthesize, take_days

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INFEASIBLE = 4


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.dump_traces:
        cfg.dump_traces = True
    if args.no_figures:
        cfg.figures = False
    if args.workers is not None:
        cfg.workers = args.workers
    report = run_experiment(cfg, out_dir=args.out)
    agg = report.aggregates
    for row in report.replications:
        print(f"replication {row['replication']}: objective "
              f"{row['objective']:.6e}, in-sample worst voltage fraction "
              f"{row['in_e_v_max']:.4f}, out-of-sample {row['out_e_v_max']:.4f}")
    if agg.get("vuf_delta_normalized"):
        print(f"normalized out-of-sample VUF delta: mean "
              f"{agg['vuf_delta_normalized']['mean']:+.4f}")
    print(f"wrote {Path(args.out) / 'report.json'}")
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.houses < 1 or args.days < 1:
        raise ConfigError("synth requires houses >= 1 and days >= 1")
    series = synthesize(args.houses, args.days, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "timeseries.csv"
    save_timeseries(series, path)
    print(f"wrote {path} ({args.houses} houses x {args.days} days, "
          f"seed {args.seed})")
    return EXIT_OK


def _load_point_doc(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read point file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"point file {path} is not valid JSON: {exc}") from exc
    for key in ("feeder", "q_setpoints"):
        if key not in doc:
            raise ConfigError(f"point file {path} lacks the {key!r} field")
    return doc


def _cmd_evaluate(args: argparse.Namespace) -> int:
    doc = _load_point_doc(args.point)
    feeder = load_feeder(resolve_feeder_path(str(doc["feeder"])))
    series = load_timeseries(args.scenarios, feeder,
                             scale=float(doc.get("scale", 1.0)))
    scen = take_days(series, list(series.days))
    ybus = assemble_admittance(feeder)
    point = operating_point_at(feeder, scen, doc["q_setpoints"], ybus=ybus)
    v_limits = doc.get("v_limits", [0.95, 1.05])
    if not (isinstance(v_limits, list) and len(v_limits) == 2
            and v_limits[0] < v_limits[1]):
        raise ConfigError("point file 'v_limits' must be [lower, upper]")
    report = evaluate(point, scen, feeder, args.capping,
                      v_limits=(float(v_limits[0]), float(v_limits[1])),
                      ybus=ybus, workers=args.workers)
    out_doc = {
        "point": {
            "feeder": doc["feeder"],
            "q_setpoints": [float(q) for q in np.asarray(doc["q_setpoints"])],
            "objective": point.objective,
        },
        "evaluation": report.to_dict(),
    }
    text = json.dumps(out_doc, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _cmd_timeseries(args: argparse.Namespace) -> int:
    report = RunReport.from_json(args.report)
    paths = emit_timeseries(report, args.out,
                            run_dir=Path(args.report).parent,
                            figures=not args.no_figures)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccopf",
        description="Chance-constrained reactive set-point optimization "
                    "for unbalanced distribution feeders.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--out", default="ccopf_out",
                       help="output directory (default: ccopf_out)")
    p_run.add_argument("--dump-traces", action="store_true",
                       help="also write per-sample evaluation traces as CSV")
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip PNG figure rendering")
    p_run.add_argument("--workers", type=int, default=None,
                       help="parallel evaluation workers")
    p_run.set_defaults(func=_cmd_run)

    p_synth = sub.add_parser("synth", help="generate synthetic household data")
    p_synth.add_argument("--houses", type=int, default=15)
    p_synth.add_argument("--days", type=int, default=25)
    p_synth.add_argument("--seed", type=int, default=7)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=_cmd_synth)

    p_eval = sub.add_parser("evaluate",
                            help="evaluate fixed set-points against scenarios")
    p_eval.add_argument("--point", required=True,
                        help="JSON with feeder, q_setpoints, optional "
                             "v_limits and scale")
    p_eval.add_argument("--scenarios", required=True, help="household CSV")
    p_eval.add_argument("--capping", action="store_true",
                        help="clip set-points into the per-sample capability")
    p_eval.add_argument("--out", default=None,
                        help="write the evaluation JSON here instead of stdout")
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_ts = sub.add_parser("timeseries",
                          help="per-minute violation tables from a run report")
    p_ts.add_argument("--report", required=True, help="path to report.json")
    p_ts.add_argument("--out", required=True, help="output directory")
    p_ts.add_argument("--no-figures", action="store_true")
    p_ts.set_defaults(func=_cmd_timeseries)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FeederError, ScenarioError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonConvergence, SingularJacobian, TuningDegenerate) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
