"""Experiment runner: config parsing, replication loop, report assembly.

A run loads (or synthesizes) household data, withholds the evaluation days
chosen from a dedicated seed so they are shared across every experiment on
the same data, then per replication draws an in-sample set, runs the chosen
tightening method, and re-evaluates the returned set-points both in-sample
and on the withheld days. The report is a plain JSON document; all numbers
in it are fixed by the configuration seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .chance import EvaluationReport, evaluate
from .driver import (
    IterationTrace,
    QuantileLoopConfig,
    TuningLoopConfig,
    run_quantile_method,
    run_tuning_method,
)
from .feeder import FeederModel, assemble_admittance, load_feeder
from .opf import OperatingPoint, SolverSettings
from .powerflow import total_vuf
from .scenario import (
    DaySeries,
    ScenarioError,
    draw_full_days,
    draw_random,
    synthesize,
    take_days,
    validate_series,
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass
class ExperimentConfig:
    feeder: str
    data_csv: str | None = None
    synth_houses: int = 15
    synth_days: int = 25
    synth_seed: int = 7
    scale: float = 1.0
    sampling_method: str = "random"     # "random" | "full-day"
    sampling_m: int = 2880
    sampling_days: int = 2
    sampling_seed: int = 1
    out_of_sample_days: int = 5
    eval_seed: int = 424242
    method: str = "quantile"            # "quantile" | "tuning"
    eps_v: float = 0.05
    eps_q: float = 0.05
    capping: bool = False
    replications: int = 1
    v_min: float = 0.95
    v_max: float = 1.05
    loop: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    workers: int = 1
    dump_traces: bool = False
    figures: bool = True

    _TOP_KEYS = {
        "feeder", "data", "scale", "sampling", "out_of_sample_days",
        "eval_seed", "method", "eps_v", "eps_q", "capping", "replications",
        "v_limits", "loop", "solver", "workers", "dump_traces", "figures",
    }
    _LOOP_KEYS = {"eta_upper", "eta_lower", "eta", "eta_s", "max_iterations"}
    _SOLVER_KEYS = {"max_outer_iter", "penalty_init", "penalty_growth",
                    "stationarity_tol", "feasibility_tol", "multistart"}

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _require(isinstance(raw, dict), "config must be a JSON object")
        unknown = sorted(set(raw) - cls._TOP_KEYS)
        _require(not unknown, f"unknown config key(s): {unknown}")
        _require("feeder" in raw and isinstance(raw["feeder"], str),
                 "config requires a 'feeder' path string")

        cfg = cls(feeder=raw["feeder"])

        data = raw.get("data", {"synth": {}})
        _require(isinstance(data, dict) and len(data) == 1
                 and next(iter(data)) in ("csv", "synth"),
                 "'data' must be {\"csv\": path} or {\"synth\": {...}}")
        if "csv" in data:
            _require(isinstance(data["csv"], str), "'data.csv' must be a path")
            cfg.data_csv = data["csv"]
        else:
            synth = data["synth"]
            _require(isinstance(synth, dict), "'data.synth' must be an object")
            bad = sorted(set(synth) - {"houses", "days", "seed"})
            _require(not bad, f"unknown data.synth key(s): {bad}")
            cfg.synth_houses = int(synth.get("houses", cfg.synth_houses))
            cfg.synth_days = int(synth.get("days", cfg.synth_days))
            cfg.synth_seed = int(synth.get("seed", cfg.synth_seed))
            _require(cfg.synth_houses >= 1, "data.synth.houses must be >= 1")
            _require(cfg.synth_days >= 2, "data.synth.days must be >= 2")

        cfg.scale = float(raw.get("scale", cfg.scale))
        _require(cfg.scale > 0, "'scale' must be positive")

        sampling = raw.get("sampling", {})
        _require(isinstance(sampling, dict), "'sampling' must be an object")
        bad = sorted(set(sampling) - {"method", "m", "days", "seed"})
        _require(not bad, f"unknown sampling key(s): {bad}")
        cfg.sampling_method = sampling.get("method", cfg.sampling_method)
        _require(cfg.sampling_method in ("random", "full-day"),
                 "sampling.method must be 'random' or 'full-day'")
        cfg.sampling_m = int(sampling.get("m", cfg.sampling_m))
        cfg.sampling_days = int(sampling.get("days", cfg.sampling_days))
        cfg.sampling_seed = int(sampling.get("seed", cfg.sampling_seed))
        _require(cfg.sampling_m >= 1, "sampling.m must be >= 1")
        _require(cfg.sampling_days >= 1, "sampling.days must be >= 1")

        cfg.out_of_sample_days = int(raw.get("out_of_sample_days",
                                             cfg.out_of_sample_days))
        _require(cfg.out_of_sample_days >= 1,
                 "'out_of_sample_days' must be >= 1")
        cfg.eval_seed = int(raw.get("eval_seed", cfg.eval_seed))

        cfg.method = raw.get("method", cfg.method)
        _require(cfg.method in ("quantile", "tuning"),
                 "'method' must be 'quantile' or 'tuning'")
        cfg.eps_v = float(raw.get("eps_v", cfg.eps_v))
        cfg.eps_q = float(raw.get("eps_q", cfg.eps_q))
        _require(0.0 <= cfg.eps_v <= 1.0, "'eps_v' must lie in [0, 1]")
        _require(0.0 <= cfg.eps_q <= 1.0, "'eps_q' must lie in [0, 1]")
        cfg.capping = bool(raw.get("capping", cfg.capping))
        cfg.replications = int(raw.get("replications", cfg.replications))
        _require(cfg.replications >= 1, "'replications' must be >= 1")

        v_limits = raw.get("v_limits", [cfg.v_min, cfg.v_max])
        _require(isinstance(v_limits, (list, tuple)) and len(v_limits) == 2,
                 "'v_limits' must be [lower, upper]")
        cfg.v_min, cfg.v_max = float(v_limits[0]), float(v_limits[1])
        _require(cfg.v_min < cfg.v_max, "'v_limits' lower must be below upper")

        cfg.loop = dict(raw.get("loop", {}))
        bad = sorted(set(cfg.loop) - cls._LOOP_KEYS)
        _require(not bad, f"unknown loop key(s): {bad}")
        cfg.solver = dict(raw.get("solver", {}))
        bad = sorted(set(cfg.solver) - cls._SOLVER_KEYS)
        _require(not bad, f"unknown solver key(s): {bad}")

        cfg.workers = int(raw.get("workers", cfg.workers))
        _require(cfg.workers >= 1, "'workers' must be >= 1")
        cfg.dump_traces = bool(raw.get("dump_traces", cfg.dump_traces))
        cfg.figures = bool(raw.get("figures", cfg.figures))
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        data = ({"csv": self.data_csv} if self.data_csv is not None
                else {"synth": {"houses": self.synth_houses,
                                "days": self.synth_days,
                                "seed": self.synth_seed}})
        return {
            "feeder": self.feeder,
            "data": data,
            "scale": self.scale,
            "sampling": {"method": self.sampling_method,
                         "m": self.sampling_m,
                         "days": self.sampling_days,
                         "seed": self.sampling_seed},
            "out_of_sample_days": self.out_of_sample_days,
            "eval_seed": self.eval_seed,
            "method": self.method,
            "eps_v": self.eps_v,
            "eps_q": self.eps_q,
            "capping": self.capping,
            "replications": self.replications,
            "v_limits": [self.v_min, self.v_max],
            "loop": dict(self.loop),
            "solver": dict(self.solver),
            "workers": self.workers,
            "dump_traces": self.dump_traces,
            "figures": self.figures,
        }

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(**self.solver)

    def loop_config(self):
        if self.method == "quantile":
            return QuantileLoopConfig(eps_v=self.eps_v, eps_q=self.eps_q,
                                      **{k: v for k, v in self.loop.items()
                                         if k in ("eta_upper", "eta_lower",
                                                  "max_iterations")})
        return TuningLoopConfig(eps_v=self.eps_v, eps_q=self.eps_q,
                                **{k: v for k, v in self.loop.items()
                                   if k in ("eta", "eta_s", "max_iterations")})


def resolve_feeder_path(name: str) -> Path:
    """A plain name with no path separator resolves to a packaged feeder."""
    p = Path(name)
    if p.suffix == "" and "/" not in name and "\\" not in name:
        from .data import packaged_feeder
        return packaged_feeder(name)
    return p


@dataclass
class RunReport:
    """Serializable run summary plus in-memory artifacts for downstream use."""

    config: dict
    replications: list[dict]
    aggregates: dict
    version: str = __version__
    # runtime attachments, not serialized
    traces: list[IterationTrace] | None = None
    points: list[OperatingPoint] | None = None
    eval_reports: list[tuple[EvaluationReport, EvaluationReport]] | None = None
    feeder: FeederModel | None = None

    def to_json(self) -> str:
        doc = {"version": self.version, "config": self.config,
               "replications": self.replications, "aggregates": self.aggregates}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, path: str | Path) -> "RunReport":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        for key in ("config", "replications", "aggregates"):
            if key not in doc:
                raise ConfigError(f"report {path} lacks the '{key}' section")
        return cls(config=doc["config"], replications=doc["replications"],
                   aggregates=doc["aggregates"],
                   version=doc.get("version", "unknown"))


_AGG_FIELDS = (
    "objective", "nominal_vuf_pct", "in_mean_vuf_pct", "out_mean_vuf_pct",
    "vuf_delta_normalized", "in_e_v_max", "out_e_v_max",
    "in_e_q_upper_max", "in_e_q_lower_max",
    "out_e_q_upper_max", "out_e_q_lower_max",
)


def _aggregate(rows: list[dict]) -> dict:
    agg = {}
    for key in _AGG_FIELDS:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            agg[key] = {"mean": float(np.mean(vals)),
                        "min": float(min(vals)),
                        "max": float(max(vals))}
        else:
            agg[key] = None
    return agg


def _replication_row(r: int, point: OperatingPoint,
                     trace: IterationTrace, in_rep: EvaluationReport,
                     oos_rep: EvaluationReport, nominal_vuf_pct: float,
                     in_days: list[int], oos_days: list[int]) -> dict:
    in_pct = in_rep.mean_vuf_pct
    out_pct = oos_rep.mean_vuf_pct
    delta = None
    if in_pct is not None and out_pct is not None and in_pct != 0.0:
        delta = (out_pct - in_pct) / in_pct
    return {
        "replication": r,
        "in_days": [int(d) for d in in_days],
        "out_days": [int(d) for d in oos_days],
        "q_setpoints": [float(q) for q in point.q_setpoints],
        "objective": float(point.objective),
        "status": point.status,
        "iterations": len(trace.records),
        "met_target": trace.met_target,
        "trace_file": f"trace_rep{r}.jsonl",
        "nominal_vuf_pct": nominal_vuf_pct,
        "in_mean_vuf_pct": in_pct,
        "out_mean_vuf_pct": out_pct,
        "vuf_delta_normalized": delta,
        "in_e_v_max": in_rep.prob_v_max,
        "out_e_v_max": oos_rep.prob_v_max,
        "in_e_q_upper_max": in_rep.prob_q_upper_max,
        "in_e_q_lower_max": in_rep.prob_q_lower_max,
        "out_e_q_upper_max": oos_rep.prob_q_upper_max,
        "out_e_q_lower_max": oos_rep.prob_q_lower_max,
        "in_sample": in_rep.to_dict(),
        "out_of_sample": oos_rep.to_dict(),
    }


def _sample_trace_frame(rep: EvaluationReport) -> pd.DataFrame:
    cols: dict[str, np.ndarray] = {}
    if rep.day is not None:
        cols["day"] = rep.day
        cols["minute"] = rep.minute
    cols["vuf_sum"] = rep.vuf_sum
    for i, lab in enumerate(rep.conn_labels):
        cols[f"v:{lab}"] = rep.vmag[:, i]
    for j, house in enumerate(rep.inverter_ids):
        cols[f"qup:{house}"] = rep.q_upper_margin[:, j]
        cols[f"qlo:{house}"] = rep.q_lower_margin[:, j]
    return pd.DataFrame(cols)


def build_series(cfg: ExperimentConfig, feeder: FeederModel) -> DaySeries:
    """Load or synthesize the day-indexed data named by the config, scaled."""
    if cfg.data_csv is not None:
        from .scenario import load_timeseries
        series = load_timeseries(cfg.data_csv, feeder, scale=cfg.scale)
    else:
        houses = [f"h{k:02d}" for k in range(1, cfg.synth_houses + 1)]
        series = synthesize(cfg.synth_houses, cfg.synth_days, cfg.synth_seed)
        if set(houses) != set(series.house_ids):
            raise ConfigError("synthesized house ids do not match expectations")
        if cfg.scale != 1.0:
            series = DaySeries(series.house_ids, series.days,
                               series.p_gen * cfg.scale,
                               series.p_load * cfg.scale)
    validate_series(series, feeder)
    return series


def split_days(series: DaySeries, n_oos: int, eval_seed: int) -> tuple[list[int], list[int]]:
    """Withhold n_oos evaluation days chosen by the dedicated seed."""
    if n_oos >= series.n_days:
        raise ConfigError(
            f"out_of_sample_days={n_oos} leaves no in-sample data "
            f"(series has {series.n_days} days)")
    rng = np.random.default_rng([eval_seed])
    oos = sorted(int(d) for d in rng.choice(series.days, size=n_oos,
                                            replace=False))
    in_days = [d for d in series.days if d not in oos]
    return in_days, oos


def run_experiment(config: ExperimentConfig,
                   out_dir: str | Path | None = None) -> RunReport:
    """Execute every replication and assemble the report.

    When out_dir is given the report JSON, a per-replication summary CSV,
    the loop traces, and (per config) sample traces and figures are written
    there.
    """
    feeder = load_feeder(resolve_feeder_path(config.feeder))
    ybus = assemble_admittance(feeder)
    series = build_series(config, feeder)
    in_days, oos_days = split_days(series, config.out_of_sample_days,
                                   config.eval_seed)
    in_pool = series.restrict(in_days)
    oos_set = take_days(series, oos_days)

    if config.sampling_method == "full-day" and config.sampling_days > len(in_days):
        raise ConfigError(
            f"sampling.days={config.sampling_days} exceeds the "
            f"{len(in_days)} available in-sample days")

    v_limits = (config.v_min, config.v_max)
    settings = config.solver_settings()
    loop_cfg = config.loop_config()

    rows = []
    traces = []
    points = []
    eval_pairs = []
    for r in range(config.replications):
        try:
            if config.sampling_method == "random":
                in_set = draw_random(in_pool, config.sampling_m,
                                     [config.sampling_seed, r])
            else:
                in_set = draw_full_days(in_pool, config.sampling_days,
                                        [config.sampling_seed, r])
            if config.method == "quantile":
                point, tight, trace = run_quantile_method(
                    feeder, in_set, loop_cfg, v_limits=v_limits,
                    capping=config.capping, settings=settings, ybus=ybus)
            else:
                point, tight, trace = run_tuning_method(
                    feeder, in_set, loop_cfg, v_limits=v_limits,
                    capping=config.capping, settings=settings, ybus=ybus)
            in_rep = evaluate(point, in_set, feeder, config.capping,
                              v_limits=v_limits, ybus=ybus,
                              workers=config.workers)
            oos_rep = evaluate(point, oos_set, feeder, config.capping,
                               v_limits=v_limits, ybus=ybus,
                               workers=config.workers)
        except Exception as exc:
            if hasattr(exc, "add_note"):
                exc.add_note(f"while running replication {r}")
            raise
        nominal = 100.0 * total_vuf(point.voltages, ybus)
        rows.append(_replication_row(r, point, trace, in_rep,
                                     oos_rep, nominal, in_days, oos_days))
        traces.append(trace)
        points.append(point)
        eval_pairs.append((in_rep, oos_rep))

    report = RunReport(config=config.to_dict(), replications=rows,
                       aggregates=_aggregate(rows), traces=traces,
                       points=points, eval_reports=eval_pairs, feeder=feeder)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        summary = pd.DataFrame([{k: row[k] for k in
                                 ("replication", "objective", "status",
                                  "nominal_vuf_pct", "in_mean_vuf_pct",
                                  "out_mean_vuf_pct", "vuf_delta_normalized",
                                  "in_e_v_max", "out_e_v_max")}
                                for row in rows])
        summary.to_csv(out / "summary.csv", index=False, float_format="%.10g")
        for r, trace in enumerate(traces):
            trace.write(out / f"trace_rep{r}.jsonl")
        if config.dump_traces:
            for r, (in_rep, oos_rep) in enumerate(eval_pairs):
                _sample_trace_frame(oos_rep).to_csv(
                    out / f"oos_trace_rep{r}.csv", index=False,
                    float_format="%.12g")
        if config.figures:
            from .plots import render_report_figure
            render_report_figure(report, out / "report.png")
    return report


_TS_COLUMNS = (
    "minute", "frac_v_upper", "frac_v_lower", "frac_q_upper", "frac_q_lower",
    "worst_v_upper", "worst_v_lower", "worst_q_upper", "worst_q_lower",
)


def _minute_table(minute: np.ndarray, vmag: np.ndarray,
                  v_limits: tuple[float, float],
                  q_up_margin: np.ndarray, q_lo_margin: np.ndarray,
                  ) -> pd.DataFrame:
    """Per-minute violation fractions and worst overshoots.

    Fractions average over connections and evaluation days; a failed sample
    (NaN voltages) counts as violating every voltage constraint.
    """
    v_min, v_max = v_limits
    n_conn = vmag.shape[1]
    n_inv = q_up_margin.shape[1]
    failed = np.isnan(vmag).any(axis=1)

    table = {k: np.zeros(1440) for k in _TS_COLUMNS}
    table["minute"] = np.arange(1440)
    for t in range(1440):
        rows = np.nonzero(minute == t)[0]
        if rows.size == 0:
            continue
        vm = vmag[rows]
        bad = failed[rows]
        n_cells = n_conn * rows.size
        up_cnt = int((vm > v_max).sum()) + int(bad.sum()) * n_conn
        lo_cnt = int((vm < v_min).sum()) + int(bad.sum()) * n_conn
        table["frac_v_upper"][t] = up_cnt / n_cells
        table["frac_v_lower"][t] = lo_cnt / n_cells
        with np.errstate(invalid="ignore"):
            over = np.fmax(vm - v_max, 0.0)
            under = np.fmax(v_min - vm, 0.0)
        table["worst_v_upper"][t] = np.nanmax(over, initial=0.0)
        table["worst_v_lower"][t] = np.nanmax(under, initial=0.0)
        if n_inv:
            qu = q_up_margin[rows]
            ql = q_lo_margin[rows]
            table["frac_q_upper"][t] = (qu > 0).sum() / (n_inv * rows.size)
            table["frac_q_lower"][t] = (ql > 0).sum() / (n_inv * rows.size)
            table["worst_q_upper"][t] = qu.max(initial=0.0)
            table["worst_q_lower"][t] = ql.max(initial=0.0)
    return pd.DataFrame({k: table[k] for k in _TS_COLUMNS})


def timeseries_tables(report: RunReport,
                      run_dir: str | Path | None = None) -> list[pd.DataFrame]:
    """One per-minute table per replication from the out-of-sample samples.

    Uses in-memory evaluation reports when present, otherwise the sample
    trace CSVs written next to the report. Rejects evaluations without time
    structure.
    """
    v_limits = tuple(report.config["v_limits"])
    tables = []
    if report.eval_reports is not None:
        for in_rep, oos_rep in report.eval_reports:
            if oos_rep.day is None or oos_rep.minute is None:
                raise ScenarioError(
                    "out-of-sample evaluation lacks day/minute structure; "
                    "a per-minute table needs full-day samples")
            tables.append(_minute_table(oos_rep.minute, oos_rep.vmag,
                                        v_limits, oos_rep.q_upper_margin,
                                        oos_rep.q_lower_margin))
        return tables

    if run_dir is None:
        raise ConfigError("report has no in-memory evaluations; "
                          "pass the directory holding its trace CSVs")
    run_dir = Path(run_dir)
    for row in report.replications:
        path = run_dir / f"oos_trace_rep{row['replication']}.csv"
        if not path.exists():
            raise ConfigError(
                f"{path} not found; re-run with dump_traces enabled "
                "to emit per-sample traces")
        frame = pd.read_csv(path)
        if "minute" not in frame.columns:
            raise ScenarioError(
                f"{path} has no time structure; per-minute output needs "
                "full-day evaluation samples")
        vcols = [c for c in frame.columns if c.startswith("v:")]
        qup = [c for c in frame.columns if c.startswith("qup:")]
        qlo = [c for c in frame.columns if c.startswith("qlo:")]
        tables.append(_minute_table(
            frame["minute"].to_numpy(), frame[vcols].to_numpy(), v_limits,
            frame[qup].to_numpy(), frame[qlo].to_numpy()))
    return tables


def emit_timeseries(report: RunReport, out_dir: str | Path, *,
                    run_dir: str | Path | None = None,
                    figures: bool = True) -> list[Path]:
    """Write the per-minute violation tables (and figures) per replication."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    eps_v = float(report.config.get("eps_v", 0.05))
    for row, table in zip(report.replications, timeseries_tables(report, run_dir)):
        r = row["replication"]
        path = out / f"timeseries_rep{r}.csv"
        table.to_csv(path, index=False, float_format="%.10g")
        written.append(path)
        if figures:
            from .plots import render_timeseries_figure
            fig_path = out / f"timeseries_rep{r}.png"
            render_timeseries_figure(table, fig_path, eps_v=eps_v)
            written.append(fig_path)
    return written
