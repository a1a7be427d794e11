"""Deterministic tightened OPF over inverter reactive set-points.

Reduced-space design: the only decision variables are the inverter reactive
set-points q. For each trial q an inner Newton power flow at the average
injections eliminates the voltages; gradients of the objective and of the
voltage-bound penalty terms with respect to q come from one adjoint solve
through the converged power flow Jacobian. Voltage bounds are enforced by an
augmented Lagrangian with outer multiplier updates; the q box is handled by
the bound-constrained quasi-Newton inner solver directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .feeder import AdmittanceMatrix, FeederModel, assemble_admittance
from .powerflow import (
    NonConvergence,
    VoltageState,
    solve_pf,
    total_vuf_squared,
    vuf_objective,
    _power_jacobian,
)
from .scenario import ScenarioSet, build_injection_map, injections_for


class Infeasible(RuntimeError):
    """Tightened problem has no feasible point (or restoration failed)."""

    def __init__(self, message: str, constraint: str = "", violation: float = 0.0):
        super().__init__(message)
        self.constraint = constraint
        self.violation = violation


@dataclass(frozen=True)
class SolverSettings:
    max_outer_iter: int = 25
    penalty_init: float = 100.0
    penalty_growth: float = 10.0
    stationarity_tol: float = 1e-6
    feasibility_tol: float = 1e-6
    multistart: int = 1


@dataclass
class TighteningSet:
    """Nonnegative margins subtracted from nominal limits.

    Voltage entries follow the non-slack connection order of the admittance
    matrix; reactive entries follow the feeder inverter order.
    """

    lam_v_upper: np.ndarray
    lam_v_lower: np.ndarray
    lam_q_upper: np.ndarray
    lam_q_lower: np.ndarray

    @classmethod
    def zeros(cls, n_conn: int, n_inverters: int) -> "TighteningSet":
        return cls(np.zeros(n_conn), np.zeros(n_conn),
                   np.zeros(n_inverters), np.zeros(n_inverters))

    def validate(self) -> None:
        for name, arr in (("lam_v_upper", self.lam_v_upper),
                          ("lam_v_lower", self.lam_v_lower),
                          ("lam_q_upper", self.lam_q_upper),
                          ("lam_q_lower", self.lam_q_lower)):
            if np.any(np.asarray(arr) < 0.0):
                raise ValueError(f"{name} contains negative tightenings")


@dataclass
class OperatingPoint:
    """A tightened-OPF solution: set-points, voltages, slack, objective."""

    q_setpoints: np.ndarray
    voltages: VoltageState
    p_slack: np.ndarray
    q_slack: np.ndarray
    objective: float
    status: str = "optimal"
    outer_iterations: int = 0


def nominal_q_limits(feeder: FeederModel, scenarios: ScenarioSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-inverter (upper, lower) reactive limits at average generation, p.u.

    q_up = +sqrt(|s|^2 - p_avg^2), q_lo = -q_up. An inverter whose average
    generation exceeds its rating gets zero limits and a warning.
    """
    idx = {h: i for i, h in enumerate(scenarios.house_ids)}
    s_base = feeder.s_base_kva
    q_up = np.zeros(len(feeder.inverters))
    for j, inv in enumerate(feeder.inverters):
        s_pu = inv.s_rating_kva / s_base
        p_avg = scenarios.p_gen_avg[idx[inv.house_id]] / s_base
        if p_avg > s_pu:
            warnings.warn(
                f"inverter {inv.house_id!r}: average generation {p_avg:.4f} p.u. "
                f"exceeds rating {s_pu:.4f} p.u.; reactive limits set to zero"
            )
            q_up[j] = 0.0
        else:
            q_up[j] = np.sqrt(s_pu * s_pu - p_avg * p_avg)
    return q_up, -q_up


def _scatter_q(q: np.ndarray, inv_pos: np.ndarray, base: np.ndarray) -> np.ndarray:
    out = base.copy()
    np.add.at(out, inv_pos, q)
    return out


def operating_point_at(feeder: FeederModel, scenarios: ScenarioSet,
                       q_setpoints, *,
                       ybus: AdmittanceMatrix | None = None) -> OperatingPoint:
    """Power flow at average injections with the given fixed set-points."""
    ybus = ybus if ybus is not None else assemble_admittance(feeder)
    q = np.asarray(q_setpoints, dtype=float)
    if q.shape != (len(feeder.inverters),):
        raise ValueError(
            f"expected {len(feeder.inverters)} set-points, got shape {q.shape}")
    imap = build_injection_map(feeder, ybus, scenarios.house_ids)
    p_spec, q_spec = injections_for(scenarios.mean_sample(), q, feeder, ybus, imap)
    result = solve_pf(p_spec, q_spec, ybus)
    return OperatingPoint(
        q_setpoints=q,
        voltages=result.voltages,
        p_slack=result.p_slack,
        q_slack=result.q_slack,
        objective=float(total_vuf_squared(result.voltages, ybus)),
        status="evaluated",
    )


def solve_ccr_opf(feeder: FeederModel, scenarios: ScenarioSet,
                  tightenings: TighteningSet,
                  warm_start: OperatingPoint | None = None, *,
                  v_limits: tuple[float, float] = (0.95, 1.05),
                  settings: SolverSettings | None = None,
                  ybus: AdmittanceMatrix | None = None) -> OperatingPoint:
    """Minimize total squared VUF at average injections under tightened limits.

    Returns an OperatingPoint whose voltages satisfy the inner power flow to
    its own tolerance and whose tightened constraints hold within
    settings.feasibility_tol. Raises Infeasible when a tightened interval is
    empty or no feasible point is found; on outer-iteration exhaustion with a
    feasible iterate in hand, returns that iterate with status
    "max_iterations" and a warning.
    """
    settings = settings or SolverSettings()
    tightenings.validate()
    ybus = ybus if ybus is not None else assemble_admittance(feeder)
    imap = build_injection_map(feeder, ybus, scenarios.house_ids)
    ns = ybus.nonslack_pos
    n_ns = ns.size
    ns_labels = [ybus.conn_labels[i] for i in ns]
    inv_ns_pos = np.asarray([int(np.nonzero(ns == p)[0][0]) for p in imap.inv_pos])

    v_min, v_max = v_limits
    v_lo = v_min + np.asarray(tightenings.lam_v_lower, dtype=float)
    v_up = v_max - np.asarray(tightenings.lam_v_upper, dtype=float)
    if v_lo.shape != (n_ns,) or v_up.shape != (n_ns,):
        raise ValueError("voltage tightenings must cover every non-slack connection")
    gap = v_lo - v_up
    if np.any(gap > 1e-12):
        worst = int(np.argmax(gap))
        raise Infeasible(
            f"empty tightened voltage interval at {ns_labels[worst]}: "
            f"[{v_lo[worst]:.6f}, {v_up[worst]:.6f}]",
            constraint=f"v@{ns_labels[worst]}", violation=float(gap[worst]),
        )
    v_lo = np.minimum(v_lo, v_up)

    q_up_nom, q_lo_nom = nominal_q_limits(feeder, scenarios)
    q_ub = q_up_nom - np.asarray(tightenings.lam_q_upper, dtype=float)
    q_lb = q_lo_nom + np.asarray(tightenings.lam_q_lower, dtype=float)
    qgap = q_lb - q_ub
    if np.any(qgap > 1e-12):
        worst = int(np.argmax(qgap))
        raise Infeasible(
            f"empty tightened reactive interval for inverter "
            f"{feeder.inverters[worst].house_id!r}",
            constraint=f"q@{feeder.inverters[worst].house_id}",
            violation=float(qgap[worst]),
        )
    q_lb = np.minimum(q_lb, q_ub)

    mean = scenarios.mean_sample()
    p_base, q_base = injections_for(mean, np.zeros(len(feeder.inverters)),
                                    feeder, ybus, imap)

    pf_state = {"warm": warm_start.voltages if warm_start is not None else None}

    def run_pf(q: np.ndarray):
        q_spec = _scatter_q(q, imap.inv_pos, q_base)
        result = solve_pf(p_base, q_spec, ybus, warm_start=pf_state["warm"])
        pf_state["warm"] = result.voltages
        return result

    def al_value_grad(q: np.ndarray, mu_up: np.ndarray, mu_lo: np.ndarray, rho: float):
        try:
            result = run_pf(q)
        except NonConvergence:
            pf_state["warm"] = None
            return np.inf, np.zeros_like(q), None
        state = result.voltages
        obj, dvm, dva = vuf_objective(state, ybus)

        c_up = state.vm[ns] - v_up
        c_lo = v_lo - state.vm[ns]
        t_up = np.maximum(0.0, mu_up + rho * c_up)
        t_lo = np.maximum(0.0, mu_lo + rho * c_lo)
        value = obj + float(((t_up ** 2 - mu_up ** 2).sum()
                             + (t_lo ** 2 - mu_lo ** 2).sum()) / (2.0 * rho))

        grad_x = np.concatenate([dva[ns], dvm[ns] + t_up - t_lo])
        J = _power_jacobian(state.phasors(), state.vm, ybus)
        y = np.linalg.solve(J.T, grad_x)
        grad_q = y[n_ns + inv_ns_pos]
        return value, grad_q, result

    def projected_gradient_norm(q: np.ndarray, g: np.ndarray) -> float:
        return float(np.abs(q - np.clip(q - g, q_lb, q_ub)).max()) if q.size else 0.0

    def one_start(q0: np.ndarray):
        mu_up = np.zeros(n_ns)
        mu_lo = np.zeros(n_ns)
        rho = settings.penalty_init
        q = np.clip(q0, q_lb, q_ub)
        best = None
        prev_viol = np.inf
        status = "max_iterations"
        outer_done = settings.max_outer_iter
        last_viol = (np.inf, "")
        for outer in range(settings.max_outer_iter):
            res = minimize(
                lambda x: al_value_grad(x, mu_up, mu_lo, rho)[:2],
                q, jac=True, method="L-BFGS-B",
                bounds=list(zip(q_lb, q_ub)),
                options={"maxiter": 400, "ftol": 1e-15,
                         "gtol": min(1e-9, 0.1 * settings.stationarity_tol)},
            )
            q = np.clip(res.x, q_lb, q_ub)
            value, grad, result = al_value_grad(q, mu_up, mu_lo, rho)
            if result is None:
                raise NonConvergence(
                    "inner power flow failed at the candidate set-points",
                    residual=np.nan, iterations=0, trace=[])
            obj, _, _ = vuf_objective(result.voltages, ybus)
            c_up = result.voltages.vm[ns] - v_up
            c_lo = v_lo - result.voltages.vm[ns]
            viol = float(max(0.0, c_up.max(initial=0.0), c_lo.max(initial=0.0)))
            side = c_up if c_up.max(initial=-np.inf) >= c_lo.max(initial=-np.inf) else c_lo
            last_viol = (viol, ns_labels[int(np.argmax(side))] if n_ns else "")
            # At the inner optimum the AL gradient equals the Lagrangian
            # gradient at the updated multipliers, so this is the KKT check.
            pg = projected_gradient_norm(q, grad)
            mu_up = np.maximum(0.0, mu_up + rho * c_up)
            mu_lo = np.maximum(0.0, mu_lo + rho * c_lo)

            feasible = viol <= settings.feasibility_tol
            if feasible and (best is None or obj < best[0]):
                best = (obj, q.copy(), result)
            if feasible and pg <= settings.stationarity_tol:
                status = "optimal"
                outer_done = outer + 1
                break
            if viol > 0.25 * prev_viol:
                rho = min(rho * settings.penalty_growth, 1e12)
            prev_viol = max(viol, np.finfo(float).tiny)
        return best, status, outer_done, last_viol

    starts = [warm_start.q_setpoints.copy() if warm_start is not None
              else np.zeros(len(feeder.inverters))]
    for k in range(1, max(1, settings.multistart)):
        rng = np.random.default_rng([20240917, k])
        starts.append(q_lb + (q_ub - q_lb) * rng.random(q_lb.size))

    overall = None
    overall_status = "max_iterations"
    overall_outer = 0
    worst_info = (np.inf, "")
    for q0 in starts:
        best, status, outer_done, last_viol = one_start(np.asarray(q0, dtype=float))
        if best is not None and (overall is None or best[0] < overall[0]):
            overall = best
            overall_status = status
            overall_outer = outer_done
        if last_viol[0] < worst_info[0]:
            worst_info = last_viol

    if overall is None:
        raise Infeasible(
            f"no feasible point found; most violated constraint v@{worst_info[1]} "
            f"by {worst_info[0]:.3e} p.u.",
            constraint=f"v@{worst_info[1]}", violation=worst_info[0],
        )
    if overall_status != "optimal":
        warnings.warn("tightened OPF hit the outer iteration budget; "
                      "returning the best feasible iterate")

    obj, q_best, result = overall
    return OperatingPoint(
        q_setpoints=q_best,
        voltages=result.voltages,
        p_slack=result.p_slack,
        q_slack=result.q_slack,
        objective=float(obj),
        status=overall_status,
        outer_iterations=overall_outer,
    )
