"""Iterative selection of voltage tightenings.

Two strategies produce a TighteningSet whose out-turn violation fractions
approach the requested levels:

* quantile loop: alternate solving the tightened OPF and re-reading the
  voltage margins off the induced empirical distributions until the margins
  stop moving;
* scaled-sigma tuning: force equal upper and lower margins proportional to
  the baseline per-connection standard deviation and bisect on the single
  scale factor until the worst voltage violation fraction lands at the
  target.

Reactive margins are computed once up front in both strategies; they do not
depend on the voltage solution.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .chance import (
    EvaluationReport,
    evaluate,
    inverter_tightenings,
    quantile,
    voltage_quantile_tightenings,
)
from .feeder import AdmittanceMatrix, FeederModel, assemble_admittance
from .opf import (
    Infeasible,
    OperatingPoint,
    SolverSettings,
    TighteningSet,
    solve_ccr_opf,
)
from .scenario import ScenarioSet


class TuningDegenerate(RuntimeError):
    """Baseline voltage spread is zero where a positive scale is required."""


@dataclass(frozen=True)
class QuantileLoopConfig:
    eps_v: float = 0.05
    eps_q: float = 0.05
    eta_upper: float = 1e-4
    eta_lower: float = 1e-4
    max_iterations: int = 30


@dataclass(frozen=True)
class TuningLoopConfig:
    eps_v: float = 0.05
    eps_q: float = 0.05
    eta: float = 0.005
    eta_s: float = 1e-3
    max_iterations: int = 30


@dataclass
class IterationTrace:
    """Per-iteration progress records, serializable as JSON lines."""

    method: str
    records: list[dict] = field(default_factory=list)
    met_target: bool = True

    def append(self, **fields) -> None:
        self.records.append(fields)

    def to_json_lines(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json_lines())


def _loop_record(kappa: int, point: OperatingPoint, report: EvaluationReport,
                 lam_up: np.ndarray, lam_lo: np.ndarray) -> dict:
    return {
        "kappa": kappa,
        "status": point.status,
        "objective": point.objective,
        "mean_vuf_pct": report.mean_vuf_pct,
        "e_v_upper_max": report.prob_v_upper_max,
        "e_v_lower_max": report.prob_v_lower_max,
        "e_v_max": report.prob_v_max,
        "e_q_upper_max": report.prob_q_upper_max,
        "e_q_lower_max": report.prob_q_lower_max,
        "lam_v_upper_max": float(lam_up.max(initial=0.0)),
        "lam_v_lower_max": float(lam_lo.max(initial=0.0)),
        "lam_v_upper": [float(x) for x in lam_up],
        "lam_v_lower": [float(x) for x in lam_lo],
    }


def run_quantile_method(feeder: FeederModel, scenarios: ScenarioSet,
                        config: QuantileLoopConfig | None = None, *,
                        v_limits: tuple[float, float] = (0.95, 1.05),
                        capping: bool = False,
                        settings: SolverSettings | None = None,
                        ybus: AdmittanceMatrix | None = None,
                        ) -> tuple[OperatingPoint, TighteningSet, IterationTrace]:
    """Fixed-point iteration on the voltage margins.

    Converges when both margin vectors change by at most the configured
    tolerances between consecutive iterations. On budget exhaustion the
    iterate with the smallest worst-case voltage violation fraction
    (objective value as tie-break) is returned and the trace is flagged.
    """
    cfg = config or QuantileLoopConfig()
    ybus = ybus if ybus is not None else assemble_admittance(feeder)
    n_ns = ybus.nonslack_pos.size

    lam_q_up, lam_q_lo = inverter_tightenings(feeder, scenarios, cfg.eps_q)
    lam_up = np.zeros(n_ns)
    lam_lo = np.zeros(n_ns)
    trace = IterationTrace(method="quantile")
    warm: OperatingPoint | None = None
    best = None

    for kappa in range(cfg.max_iterations):
        tight = TighteningSet(lam_up.copy(), lam_lo.copy(),
                              lam_q_up.copy(), lam_q_lo.copy())
        point = solve_ccr_opf(feeder, scenarios, tight, warm,
                              v_limits=v_limits, settings=settings, ybus=ybus)
        report = evaluate(point, scenarios, feeder, capping,
                          v_limits=v_limits, ybus=ybus)
        new_up, new_lo = voltage_quantile_tightenings(point, report, cfg.eps_v)
        d_up = float(np.abs(new_up - lam_up).max(initial=0.0))
        d_lo = float(np.abs(new_lo - lam_lo).max(initial=0.0))

        rec = _loop_record(kappa, point, report, lam_up, lam_lo)
        rec.update({"d_upper": d_up, "d_lower": d_lo})
        trace.append(**rec)

        key = (report.prob_v_max, point.objective)
        if best is None or key < best[0]:
            best = (key, point, tight, report)

        if d_up <= cfg.eta_upper and d_lo <= cfg.eta_lower:
            return point, tight, trace

        lam_up, lam_lo = new_up, new_lo
        warm = point

    trace.met_target = False
    warnings.warn("quantile loop exhausted its iteration budget; "
                  "returning the iterate with the smallest violation fraction")
    _, point, tight, _ = best
    return point, tight, trace


def estimate_sigma(feeder: FeederModel, scenarios: ScenarioSet, *,
                   eps_q: float = 0.05,
                   v_limits: tuple[float, float] = (0.95, 1.05),
                   capping: bool = False,
                   settings: SolverSettings | None = None,
                   ybus: AdmittanceMatrix | None = None,
                   ) -> tuple[np.ndarray, OperatingPoint, EvaluationReport]:
    """Baseline solve with zero voltage margins.

    Returns the per-connection population standard deviation of the induced
    voltage magnitudes (failed samples excluded), the baseline operating
    point, and its evaluation report.
    """
    ybus = ybus if ybus is not None else assemble_admittance(feeder)
    n_ns = ybus.nonslack_pos.size
    lam_q_up, lam_q_lo = inverter_tightenings(feeder, scenarios, eps_q)
    tight = TighteningSet(np.zeros(n_ns), np.zeros(n_ns), lam_q_up, lam_q_lo)
    point = solve_ccr_opf(feeder, scenarios, tight,
                          v_limits=v_limits, settings=settings, ybus=ybus)
    report = evaluate(point, scenarios, feeder, capping,
                      v_limits=v_limits, ybus=ybus)
    ok = np.ones(report.m, dtype=bool)
    ok[list(report.failed_samples)] = False
    if not ok.any():
        raise TuningDegenerate("every baseline sample failed to converge")
    sigma = report.vmag[ok].std(axis=0, ddof=0)
    return sigma, point, report


def init_tuning_bounds(point: OperatingPoint, report: EvaluationReport,
                       sigma: np.ndarray, eps_v: float) -> tuple[float, float]:
    """Initial scale interval [0, s_max].

    s_max is twice the largest lower-side quantile gap divided by the
    standard deviation of the connection attaining it; a nonpositive gap
    clamps to zero. A zero standard deviation at that connection leaves no
    usable scale direction.
    """
    vm_nom = point.voltages.vm[report.nonslack_pos]
    n = len(report.conn_labels)
    raw = np.empty(n)
    for c in range(n):
        raw[c] = vm_nom[c] - quantile(report.voltage_distribution(c), eps_v)
    worst = int(np.argmax(raw))
    sig_star = float(sigma[worst])
    if sig_star <= 0.0:
        raise TuningDegenerate(
            f"zero voltage spread at {report.conn_labels[worst]}; "
            "cannot scale tightenings")
    peak = max(raw[worst], 0.0)
    return 0.0, 2.0 * peak / sig_star


def run_tuning_method(feeder: FeederModel, scenarios: ScenarioSet,
                      config: TuningLoopConfig | None = None, *,
                      v_limits: tuple[float, float] = (0.95, 1.05),
                      capping: bool = False,
                      settings: SolverSettings | None = None,
                      ybus: AdmittanceMatrix | None = None,
                      ) -> tuple[OperatingPoint, TighteningSet, IterationTrace]:
    """Bisect a single scale on sigma-proportional equal margins.

    Stops when the worst voltage violation fraction lands within eta of the
    target level or the scale interval is narrower than eta_s. Among
    iterates meeting the target the one with the lowest objective wins; if
    none meets it the iterate with the smallest violation fraction is
    returned and the trace flagged.
    """
    cfg = config or TuningLoopConfig()
    ybus = ybus if ybus is not None else assemble_admittance(feeder)
    lam_q_up, lam_q_lo = inverter_tightenings(feeder, scenarios, cfg.eps_q)
    sigma, point0, report0 = estimate_sigma(
        feeder, scenarios, eps_q=cfg.eps_q, v_limits=v_limits,
        capping=capping, settings=settings, ybus=ybus)
    trace = IterationTrace(method="tuning")
    n_ns = ybus.nonslack_pos.size
    zero = np.zeros(n_ns)
    tight0 = TighteningSet(zero.copy(), zero.copy(),
                           lam_q_up.copy(), lam_q_lo.copy())
    try:
        s_min, s_max = init_tuning_bounds(point0, report0, sigma, cfg.eps_v)
    except TuningDegenerate:
        # No scale direction available. A violation-free baseline needs no
        # margins, so s collapses to zero; otherwise the scheme is stuck.
        if report0.prob_v_max == 0.0:
            trace.append(stage="baseline", kappa=0, s=0.0, s_min=0.0,
                         s_max=0.0, objective=point0.objective,
                         e_v_max=report0.prob_v_max, accepted=True)
            return point0, tight0, trace
        raise
    trace.append(stage="baseline", kappa=0, s=0.0, s_min=s_min, s_max=s_max,
                 objective=point0.objective, e_v_max=report0.prob_v_max,
                 accepted=report0.prob_v_max <= cfg.eps_v)

    accepted = []
    if report0.prob_v_max <= cfg.eps_v:
        accepted.append((point0.objective, point0, tight0))
    fallback = (report0.prob_v_max, point0.objective, point0, tight0)

    warm: OperatingPoint | None = point0
    for kappa in range(1, cfg.max_iterations):
        if s_max - s_min <= cfg.eta_s:
            break
        s = (s_max - s_min) / 2.0 + s_min
        lam = s * sigma
        tight = TighteningSet(lam.copy(), lam.copy(),
                              lam_q_up.copy(), lam_q_lo.copy())
        try:
            point = solve_ccr_opf(feeder, scenarios, tight, warm,
                                  v_limits=v_limits, settings=settings,
                                  ybus=ybus)
        except Infeasible:
            # over-tightened: shrink from above without a candidate
            trace.append(stage="bisection", kappa=kappa, s=s, s_min=s_min,
                         s_max=s_max, objective=None, e_v_max=None,
                         accepted=False, infeasible=True)
            s_max = s
            continue
        report = evaluate(point, scenarios, feeder, capping,
                          v_limits=v_limits, ybus=ybus)
        e_v = report.prob_v_max
        ok = e_v <= cfg.eps_v
        trace.append(stage="bisection", kappa=kappa, s=s, s_min=s_min,
                     s_max=s_max, objective=point.objective, e_v_max=e_v,
                     accepted=ok)
        if ok:
            accepted.append((point.objective, point, tight))
        if (e_v, point.objective) < fallback[:2]:
            fallback = (e_v, point.objective, point, tight)
        warm = point

        if abs(e_v - cfg.eps_v) <= cfg.eta:
            break
        if e_v <= cfg.eps_v:
            s_max = s
        else:
            s_min = s

    if accepted:
        _, point, tight = min(accepted, key=lambda t: t[0])
        return point, tight, trace

    trace.met_target = False
    warnings.warn("tuning loop found no iterate meeting the target level; "
                  "returning the iterate with the smallest violation fraction")
    return fallback[2], fallback[3], trace
