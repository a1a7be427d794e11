"""Three-phase power flow in polar coordinates plus sequence/unbalance math.

Every present (node, phase) pair is one connection; the solver state is the
magnitude and angle of each connection's voltage phasor. Slack connections
are pinned to 1.0 p.u. at angles (0, -120, +120) degrees and never enter the
Newton system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import PHASES, AdmittanceMatrix

# Slack / flat-start angles per phase, radians.
PHASE_ANGLES = {"a": 0.0, "b": -2.0 * np.pi / 3.0, "c": 2.0 * np.pi / 3.0}

# Rotations applied to (a, b, c) phasors before summation.
_SHIFT_NEG = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
_SHIFT_POS = np.array([0.0, 2.0 * np.pi / 3.0, -2.0 * np.pi / 3.0])
_ROT_NEG = np.exp(1j * _SHIFT_NEG)
_ROT_POS = np.exp(1j * _SHIFT_POS)


class NonConvergence(RuntimeError):
    """Newton iteration exhausted max_iter without meeting tolerance."""

    def __init__(self, message: str, residual: float, iterations: int, trace: list[float]):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.trace = trace


class SingularJacobian(RuntimeError):
    """The power flow Jacobian was singular at the current iterate."""


class NotThreePhase(ValueError):
    """Sequence quantities requested at a node lacking a phase."""


class DegenerateSequence(ValueError):
    """Positive-sequence magnitude is zero; VUF undefined."""


@dataclass
class VoltageState:
    """Voltage magnitudes (p.u.) and angles (rad) over present connections."""

    vm: np.ndarray
    va: np.ndarray

    def copy(self) -> "VoltageState":
        return VoltageState(self.vm.copy(), self.va.copy())

    def phasors(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


@dataclass(frozen=True)
class PowerFlowResult:
    voltages: VoltageState
    p_slack: np.ndarray
    q_slack: np.ndarray
    iterations: int
    max_residual: float


@dataclass(frozen=True)
class SequenceVoltages:
    """Negative/positive sequence phasors of one three-phase node.

    Follows the summation convention without the conventional 1/3 factor;
    the factor cancels in the unbalance ratio.
    """

    v_neg: complex
    v_pos: complex

    @property
    def vd_neg(self) -> float:
        return self.v_neg.real

    @property
    def vq_neg(self) -> float:
        return self.v_neg.imag

    @property
    def vd_pos(self) -> float:
        return self.v_pos.real

    @property
    def vq_pos(self) -> float:
        return self.v_pos.imag


def flat_start(ybus: AdmittanceMatrix) -> VoltageState:
    """Unit magnitudes at the per-phase slack angles."""
    vm = np.ones(ybus.n_conn)
    va = np.array([PHASE_ANGLES[p] for p in ybus.conn_phase])
    return VoltageState(vm, va)


def _complex_power(V: np.ndarray, Yc: np.ndarray) -> np.ndarray:
    return V * np.conj(Yc @ V)


def mismatch(state: VoltageState, p_spec: np.ndarray, q_spec: np.ndarray,
             ybus: AdmittanceMatrix) -> np.ndarray:
    """Power balance residual [P_spec - P(v); Q_spec - Q(v)] at non-slack rows.

    p_spec/q_spec are full-length per-connection injection arrays (p.u.);
    slack entries are ignored.
    """
    S = _complex_power(state.phasors(), ybus.Yc)
    ns = ybus.nonslack_pos
    return np.concatenate([p_spec[ns] - S.real[ns], q_spec[ns] - S.imag[ns]])


def _power_jacobian(V: np.ndarray, vm: np.ndarray, ybus: AdmittanceMatrix) -> np.ndarray:
    """d[P;Q]/d[va;vm] of the calculated injections, non-slack block.

    Complex-matrix form: dS/dva = j diag(V) conj(diag(I) - Y diag(V)),
    dS/dvm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|).
    """
    Yc = ybus.Yc
    I = Yc @ V
    Vn = V / vm

    M = -Yc * V[None, :]
    np.fill_diagonal(M, M.diagonal() + I)
    dS_dVa = 1j * V[:, None] * np.conj(M)

    dS_dVm = V[:, None] * np.conj(Yc * Vn[None, :])
    np.fill_diagonal(dS_dVm, dS_dVm.diagonal() + np.conj(I) * Vn)

    ns = ybus.nonslack_pos
    block = np.ix_(ns, ns)
    return np.block([
        [dS_dVa[block].real, dS_dVm[block].real],
        [dS_dVa[block].imag, dS_dVm[block].imag],
    ])


def mismatch_jacobian(state: VoltageState, ybus: AdmittanceMatrix) -> np.ndarray:
    """Analytic Jacobian of mismatch() w.r.t. [va_nonslack; vm_nonslack]."""
    return -_power_jacobian(state.phasors(), state.vm, ybus)


def solve_pf(p_spec: np.ndarray, q_spec: np.ndarray, ybus: AdmittanceMatrix,
             warm_start: VoltageState | None = None, *,
             tol: float = 1e-8, max_iter: int = 50) -> PowerFlowResult:
    """Newton-Raphson power flow with analytic Jacobian and step halving.

    Parameters
    ----------
    p_spec, q_spec : full-length per-connection injections in p.u.
    warm_start : starting voltages; flat start at slack angles if omitted.
    tol : infinity-norm residual tolerance (p.u.).
    max_iter : Newton step budget.

    Returns a PowerFlowResult whose slack injections are recovered by
    evaluating the balance equations at the slack rows.

    Raises NonConvergence (with the residual trace) when the budget is
    exhausted and SingularJacobian when the Newton system cannot be solved.
    """
    state = warm_start.copy() if warm_start is not None else flat_start(ybus)
    ns = ybus.nonslack_pos
    m = ns.size

    r = mismatch(state, p_spec, q_spec, ybus)
    norm = float(np.abs(r).max()) if r.size else 0.0
    trace = [norm]
    iterations = 0
    while norm > tol:
        if iterations >= max_iter:
            raise NonConvergence(
                f"power flow did not converge in {max_iter} iterations "
                f"(residual {norm:.3e} > tol {tol:.1e})",
                residual=norm, iterations=iterations, trace=trace,
            )
        J = _power_jacobian(state.phasors(), state.vm, ybus)
        try:
            dx = np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(
                f"singular Jacobian at iteration {iterations} (residual {norm:.3e})"
            ) from exc

        # Plain Newton step; halve up to 4 times if the residual grows.
        va0, vm0 = state.va[ns].copy(), state.vm[ns].copy()
        step = 1.0
        for halving in range(5):
            state.va[ns] = va0 + step * dx[:m]
            state.vm[ns] = vm0 + step * dx[m:]
            r_new = mismatch(state, p_spec, q_spec, ybus)
            norm_new = float(np.abs(r_new).max())
            if norm_new < norm or halving == 4:
                break
            step /= 2.0
        r, norm = r_new, norm_new
        trace.append(norm)
        iterations += 1

    S = _complex_power(state.phasors(), ybus.Yc)
    sl = ybus.slack_pos
    return PowerFlowResult(
        voltages=state,
        p_slack=S.real[sl].copy(),
        q_slack=S.imag[sl].copy(),
        iterations=iterations,
        max_residual=norm,
    )


def _snap(v: complex, scale: float) -> complex:
    # Phasor sums below the summation noise floor are exactly zero for all
    # practical purposes; flush them so balanced inputs give VUF == 0.
    if abs(v) < 16.0 * np.finfo(float).eps * scale:
        return 0.0 + 0.0j
    return v


def sequence_voltages(vm: np.ndarray, va: np.ndarray) -> SequenceVoltages:
    """Sequence phasors of one node from its three phase voltages (a, b, c)."""
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (3,) or va.shape != (3,):
        raise NotThreePhase("sequence voltages need exactly three phase voltages")
    scale = float(vm.sum())
    v_neg = _snap(complex((vm * np.exp(1j * (va + _SHIFT_NEG))).sum()), scale)
    v_pos = _snap(complex((vm * np.exp(1j * (va + _SHIFT_POS))).sum()), scale)
    return SequenceVoltages(v_neg=v_neg, v_pos=v_pos)


def node_sequence(state: VoltageState, ybus: AdmittanceMatrix, node_id: str) -> SequenceVoltages:
    """Sequence phasors at a named node; requires all three phases present."""
    for nid, grp in ybus.three_phase_groups:
        if nid == node_id:
            idx = np.asarray(grp)
            return sequence_voltages(state.vm[idx], state.va[idx])
    present = [p for (n, p), _ in ybus.index.items() if n == node_id]
    raise NotThreePhase(
        f"node {node_id!r} does not carry all three phases"
        + (f" (present: {''.join(sorted(set(present) & set(PHASES)))})" if present else "")
    )


def vuf_squared(seq: SequenceVoltages) -> float:
    """Squared voltage unbalance factor |v_neg|^2 / |v_pos|^2."""
    den = seq.vd_pos ** 2 + seq.vq_pos ** 2
    if den == 0.0:
        raise DegenerateSequence("positive-sequence magnitude is zero")
    return (seq.vd_neg ** 2 + seq.vq_neg ** 2) / den


def total_vuf_squared(state: VoltageState, ybus: AdmittanceMatrix) -> float:
    """Sum of squared VUF over all non-slack nodes carrying three phases."""
    return sum(
        vuf_squared(node_sequence(state, ybus, nid))
        for nid, _ in ybus.three_phase_groups
    )


def total_vuf(state: VoltageState, ybus: AdmittanceMatrix) -> float:
    """Sum of (unsquared) VUF over three-phase nodes; reporting quantity."""
    return sum(
        np.sqrt(vuf_squared(node_sequence(state, ybus, nid)))
        for nid, _ in ybus.three_phase_groups
    )


def vuf_objective(state: VoltageState, ybus: AdmittanceMatrix) -> tuple[float, np.ndarray, np.ndarray]:
    """Total squared VUF and its gradient w.r.t. (vm, va), full-length arrays.

    The gradient treats each node's squared ratio N/D with
    dN/dx = 2 Re(conj(v_neg) dv_neg/dx); dv_neg/dvm = rot e^{j va},
    dv_neg/dva = j rot V, and analogously for D.
    """
    V = state.phasors()
    total = 0.0
    dvm = np.zeros(ybus.n_conn)
    dva = np.zeros(ybus.n_conn)
    for _, grp in ybus.three_phase_groups:
        idx = np.asarray(grp)
        Vg = V[idx]
        scale = float(state.vm[idx].sum())
        vn = _snap(complex((Vg * _ROT_NEG).sum()), scale)
        vp = _snap(complex((Vg * _ROT_POS).sum()), scale)
        D = abs(vp) ** 2
        if D == 0.0:
            raise DegenerateSequence("positive-sequence magnitude is zero during optimization")
        N = abs(vn) ** 2
        total += N / D

        eja = np.exp(1j * state.va[idx])
        dN_dvm = 2.0 * (np.conj(vn) * _ROT_NEG * eja).real
        dN_dva = 2.0 * (np.conj(vn) * _ROT_NEG * 1j * Vg).real
        dD_dvm = 2.0 * (np.conj(vp) * _ROT_POS * eja).real
        dD_dva = 2.0 * (np.conj(vp) * _ROT_POS * 1j * Vg).real
        dvm[idx] += (dN_dvm * D - N * dD_dvm) / D ** 2
        dva[idx] += (dN_dva * D - N * dD_dva) / D ** 2
    return total, dvm, dva
