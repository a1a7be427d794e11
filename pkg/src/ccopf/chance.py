"""Empirical quantiles, limit tightenings, and Monte Carlo evaluation.

Probabilities reported here are exact sample fractions (violation count over
sample count). A sample whose power flow fails to converge is counted as
violating every constraint and is excluded from the voltage distributions.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .feeder import AdmittanceMatrix, FeederModel, assemble_admittance
from .opf import OperatingPoint, nominal_q_limits
from .powerflow import (
    DegenerateSequence,
    NonConvergence,
    SingularJacobian,
    VoltageState,
    solve_pf,
    total_vuf,
)
from .scenario import ScenarioSet, build_injection_map


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Sorted finite samples of one scalar quantity, with a provenance label."""

    values: np.ndarray
    constraint: str = ""

    @classmethod
    def from_samples(cls, samples, constraint: str = "") -> "EmpiricalDistribution":
        arr = np.asarray(samples, dtype=float).ravel()
        arr = arr[np.isfinite(arr)]
        if arr.size == 0:
            raise ValueError(f"empty sample set for {constraint or 'distribution'}")
        return cls(values=np.sort(arr), constraint=constraint)

    @property
    def m(self) -> int:
        return int(self.values.size)


def quantile(dist: EmpiricalDistribution, alpha: float) -> float:
    """Lower empirical quantile: the ceil(alpha*M)-th order statistic.

    alpha = 0 returns the smallest sample. The tiny slack inside the ceiling
    absorbs binary round-off of products such as 0.07 * 100.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {alpha}")
    m = dist.m
    k = max(1, math.ceil(alpha * m - 1e-9))
    return float(dist.values[min(k, m) - 1])


def inverter_tightenings(feeder: FeederModel, scenarios: ScenarioSet,
                         eps_q: float) -> tuple[np.ndarray, np.ndarray]:
    """Reactive-limit margins so the capability constraint holds with
    probability 1 - eps_q under the sampled generation.

    Per sample the deliverable reactive magnitude is
    sqrt(max(0, rating^2 - p^2)). The upper margin comes from the eps_q
    quantile of that magnitude, the lower margin from the (1 - eps_q)
    quantile of its negation, both clamped at zero.
    """
    if not 0.0 <= eps_q <= 1.0:
        raise ValueError(f"eps_q must lie in [0, 1], got {eps_q}")
    s_base = feeder.s_base_kva
    idx = {h: i for i, h in enumerate(scenarios.house_ids)}
    q_up_nom, q_lo_nom = nominal_q_limits(feeder, scenarios)
    n_inv = len(feeder.inverters)
    lam_up = np.zeros(n_inv)
    lam_lo = np.zeros(n_inv)
    for j, inv in enumerate(feeder.inverters):
        s_pu = inv.s_rating_kva / s_base
        p = scenarios.p_gen[:, idx[inv.house_id]] / s_base
        cap = np.sqrt(np.maximum(0.0, s_pu * s_pu - p * p))
        dist = EmpiricalDistribution.from_samples(cap, f"qcap@{inv.house_id}")
        lam_up[j] = max(0.0, q_up_nom[j] - quantile(dist, eps_q))
        neg = EmpiricalDistribution.from_samples(-cap, f"-qcap@{inv.house_id}")
        lam_lo[j] = max(0.0, quantile(neg, 1.0 - eps_q) - q_lo_nom[j])
    return lam_up, lam_lo


@dataclass
class EvaluationReport:
    """Per-constraint empirical violation fractions plus sample-level detail."""

    m: int
    capping: bool
    v_limits: tuple[float, float]
    conn_labels: tuple[str, ...]
    nonslack_pos: np.ndarray
    inverter_ids: tuple[str, ...]
    vmag: np.ndarray            # (m, n_conn) p.u., NaN rows where PF failed
    vuf_sum: np.ndarray         # (m,) sum over three-phase nodes, NaN on failure
    prob_v_upper: np.ndarray    # per connection, exact count / m
    prob_v_lower: np.ndarray
    prob_q_upper: np.ndarray    # per inverter
    prob_q_lower: np.ndarray
    q_upper_margin: np.ndarray  # (m, n_inv) p.u. overshoot above the limit
    q_lower_margin: np.ndarray
    failed_samples: tuple[int, ...]
    cap_sample: np.ndarray      # capping log: sample index per event
    cap_inverter: np.ndarray    # inverter index per event
    cap_requested: np.ndarray
    cap_applied: np.ndarray
    day: np.ndarray | None = None
    minute: np.ndarray | None = None

    @property
    def prob_v_upper_max(self) -> float:
        return float(self.prob_v_upper.max(initial=0.0))

    @property
    def prob_v_lower_max(self) -> float:
        return float(self.prob_v_lower.max(initial=0.0))

    @property
    def prob_q_upper_max(self) -> float:
        return float(self.prob_q_upper.max(initial=0.0))

    @property
    def prob_q_lower_max(self) -> float:
        return float(self.prob_q_lower.max(initial=0.0))

    @property
    def prob_v_max(self) -> float:
        """Worst voltage violation fraction over both bounds and all connections."""
        return max(self.prob_v_upper_max, self.prob_v_lower_max)

    @property
    def n_ok(self) -> int:
        return self.m - len(self.failed_samples)

    @property
    def mean_vuf(self) -> float | None:
        if self.n_ok == 0:
            return None
        return float(np.nanmean(self.vuf_sum))

    @property
    def mean_vuf_pct(self) -> float | None:
        mv = self.mean_vuf
        return None if mv is None else 100.0 * mv

    @property
    def capping_event_count(self) -> int:
        return int(self.cap_sample.size)

    def voltage_distribution(self, conn: int | str) -> EmpiricalDistribution:
        if isinstance(conn, str):
            conn = self.conn_labels.index(conn)
        return EmpiricalDistribution.from_samples(
            self.vmag[:, conn], f"v@{self.conn_labels[conn]}")

    def to_dict(self) -> dict:
        cap_per_inv = np.bincount(self.cap_inverter,
                                  minlength=len(self.inverter_ids))
        return {
            "m": self.m,
            "capping": self.capping,
            "v_limits": [self.v_limits[0], self.v_limits[1]],
            "failed_samples": len(self.failed_samples),
            "prob_v_upper": {lab: float(p) for lab, p in
                             zip(self.conn_labels, self.prob_v_upper)},
            "prob_v_lower": {lab: float(p) for lab, p in
                             zip(self.conn_labels, self.prob_v_lower)},
            "prob_q_upper": {h: float(p) for h, p in
                             zip(self.inverter_ids, self.prob_q_upper)},
            "prob_q_lower": {h: float(p) for h, p in
                             zip(self.inverter_ids, self.prob_q_lower)},
            "worst": {
                "v_upper": self.prob_v_upper_max,
                "v_lower": self.prob_v_lower_max,
                "v_max": self.prob_v_max,
                "q_upper": self.prob_q_upper_max,
                "q_lower": self.prob_q_lower_max,
            },
            "mean_vuf": self.mean_vuf,
            "mean_vuf_pct": self.mean_vuf_pct,
            "capping_events": self.capping_event_count,
            "capping_per_inverter": {h: int(c) for h, c in
                                     zip(self.inverter_ids, cap_per_inv)},
        }


def _pf_block(ybus: AdmittanceMatrix, P: np.ndarray, Q: np.ndarray,
              warm_vm: np.ndarray, warm_va: np.ndarray,
              tol: float, max_iter: int, lo: int, hi: int):
    """Solve samples [lo, hi); every sample restarts from the same voltages."""
    ns = ybus.nonslack_pos
    vmag = np.empty((hi - lo, ns.size))
    vuf = np.empty(hi - lo)
    failed = []
    warm = VoltageState(vm=warm_vm, va=warm_va)
    for k, s in enumerate(range(lo, hi)):
        try:
            res = solve_pf(P[s], Q[s], ybus, warm_start=warm,
                           tol=tol, max_iter=max_iter)
            vmag[k] = res.voltages.vm[ns]
            vuf[k] = total_vuf(res.voltages, ybus)
        except (NonConvergence, SingularJacobian, DegenerateSequence):
            vmag[k] = np.nan
            vuf[k] = np.nan
            failed.append(s)
    return lo, vmag, vuf, failed


def evaluate(point: OperatingPoint, scenarios: ScenarioSet, feeder: FeederModel,
             capping: bool = False, *,
             v_limits: tuple[float, float] = (0.95, 1.05),
             ybus: AdmittanceMatrix | None = None,
             workers: int = 1,
             pf_tol: float = 1e-8, pf_max_iter: int = 50) -> EvaluationReport:
    """Re-solve the power flow at every sample with the set-points held fixed.

    With capping enabled each inverter clips its set-point into the
    per-sample capability interval before injection, and violation
    indicators are taken on the applied values. Results are independent of
    the worker count because every sample starts from the operating-point
    voltages.
    """
    ybus = ybus if ybus is not None else assemble_admittance(feeder)
    imap = build_injection_map(feeder, ybus, scenarios.house_ids)
    ns = ybus.nonslack_pos
    s_base = feeder.s_base_kva
    m = scenarios.m
    n_inv = len(feeder.inverters)
    v_min, v_max = v_limits

    p_gen_pu = scenarios.p_gen[:, imap.inv_house] / s_base
    s_pu = np.asarray([inv.s_rating_kva for inv in feeder.inverters]) / s_base
    q_cap = np.sqrt(np.maximum(0.0, s_pu[None, :] ** 2 - p_gen_pu ** 2))
    q_req = np.broadcast_to(point.q_setpoints, (m, n_inv))
    if capping:
        q_eff = np.clip(q_req, -q_cap, q_cap)
        changed = q_eff != q_req
        cap_sample, cap_inv = np.nonzero(changed)
    else:
        q_eff = np.array(q_req, dtype=float)
        cap_sample = np.empty(0, dtype=int)
        cap_inv = np.empty(0, dtype=int)

    q_up_margin = np.maximum(0.0, q_eff - q_cap)
    q_lo_margin = np.maximum(0.0, -q_cap - q_eff)
    q_up_ind = q_eff > q_cap
    q_lo_ind = q_eff < -q_cap

    P = np.zeros((m, ybus.n_conn))
    Q = np.zeros((m, ybus.n_conn))
    for j in range(imap.load_pos.size):
        pl = scenarios.p_load[:, imap.load_house[j]] * imap.load_scale[j] / s_base
        P[:, imap.load_pos[j]] -= pl
        Q[:, imap.load_pos[j]] -= imap.load_gamma[j] * pl
    for j in range(imap.inv_pos.size):
        P[:, imap.inv_pos[j]] += p_gen_pu[:, j]
        Q[:, imap.inv_pos[j]] += q_eff[:, j]

    vmag = np.empty((m, ns.size))
    vuf = np.empty(m)
    failed: list[int] = []
    warm_vm = point.voltages.vm
    warm_va = point.voltages.va
    if workers <= 1 or m < 2 * workers:
        _, vmag, vuf, failed = _pf_block(ybus, P, Q, warm_vm, warm_va,
                                         pf_tol, pf_max_iter, 0, m)
    else:
        edges = np.linspace(0, m, workers + 1, dtype=int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_pf_block, ybus, P[lo:hi], Q[lo:hi],
                                   warm_vm, warm_va, pf_tol, pf_max_iter,
                                   0, hi - lo)
                       for lo, hi in zip(edges[:-1], edges[1:])]
            for (lo, hi), fut in zip(zip(edges[:-1], edges[1:]), futures):
                _, vb, ub, fb = fut.result()
                vmag[lo:hi] = vb
                vuf[lo:hi] = ub
                failed.extend(lo + s for s in fb)

    failed_set = sorted(failed)
    ok = np.ones(m, dtype=bool)
    ok[failed_set] = False
    n_failed = len(failed_set)

    counts_v_up = (vmag[ok] > v_max).sum(axis=0) + n_failed
    counts_v_lo = (vmag[ok] < v_min).sum(axis=0) + n_failed
    counts_q_up = q_up_ind[ok].sum(axis=0) + n_failed
    counts_q_lo = q_lo_ind[ok].sum(axis=0) + n_failed

    return EvaluationReport(
        m=m,
        capping=capping,
        v_limits=(v_min, v_max),
        conn_labels=tuple(ybus.conn_labels[i] for i in ns),
        nonslack_pos=ns.copy(),
        inverter_ids=tuple(inv.house_id for inv in feeder.inverters),
        vmag=vmag,
        vuf_sum=vuf,
        prob_v_upper=counts_v_up / m,
        prob_v_lower=counts_v_lo / m,
        prob_q_upper=counts_q_up / m,
        prob_q_lower=counts_q_lo / m,
        q_upper_margin=q_up_margin,
        q_lower_margin=q_lo_margin,
        failed_samples=tuple(failed_set),
        cap_sample=cap_sample,
        cap_inverter=cap_inv,
        cap_requested=q_req[cap_sample, cap_inv] if cap_sample.size else np.empty(0),
        cap_applied=q_eff[cap_sample, cap_inv] if cap_sample.size else np.empty(0),
        day=None if scenarios.day is None else scenarios.day.copy(),
        minute=None if scenarios.minute is None else scenarios.minute.copy(),
    )


def voltage_quantile_tightenings(point: OperatingPoint, report: EvaluationReport,
                                 eps_v: float) -> tuple[np.ndarray, np.ndarray]:
    """Voltage margins from the empirical magnitude distributions.

    Upper margin: the (1 - eps_v) quantile minus the nominal magnitude.
    Lower margin: the nominal magnitude minus the eps_v quantile. Both are
    clamped at zero per connection.
    """
    if not 0.0 <= eps_v <= 1.0:
        raise ValueError(f"eps_v must lie in [0, 1], got {eps_v}")
    vm_nom = point.voltages.vm[report.nonslack_pos]
    n = len(report.conn_labels)
    lam_up = np.zeros(n)
    lam_lo = np.zeros(n)
    for c in range(n):
        dist = report.voltage_distribution(c)
        lam_up[c] = max(0.0, quantile(dist, 1.0 - eps_v) - vm_nom[c])
        lam_lo[c] = max(0.0, vm_nom[c] - quantile(dist, eps_v))
    return lam_up, lam_lo
