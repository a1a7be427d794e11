import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import fsolve

from ccopf import (
    DegenerateSequence,
    NonConvergence,
    NotThreePhase,
    flat_start,
    mismatch,
    mismatch_jacobian,
    node_sequence,
    sequence_voltages,
    solve_pf,
    total_vuf,
    total_vuf_squared,
    vuf_objective,
    vuf_squared,
)

ALPHA = np.exp(2j * np.pi / 3.0)


def direct_sequence(vm, va):
    """Textbook symmetrical components (without the 1/3), coded independently."""
    ph = np.asarray(vm, dtype=float) * np.exp(1j * np.asarray(va, dtype=float))
    v_neg = ph[0] + ALPHA ** 2 * ph[1] + ALPHA * ph[2]
    v_pos = ph[0] + ALPHA * ph[1] + ALPHA ** 2 * ph[2]
    return v_neg, v_pos


def pack(state, ns):
    return np.concatenate([state.va[ns], state.vm[ns]])


def unpack(x, template, ns):
    st_ = template.copy()
    st_.va[ns] = x[: ns.size]
    st_.vm[ns] = x[ns.size:]
    return st_


# ---------------------------------------------------------------- solver


def test_two_bus_matches_closed_form(two_bus):
    # Load p behind pure reactance x: imag part is -p*x, real part solves
    # a^2 - a + (p*x)^2 = 0, so |V|^2 = a^2 + b^2 = a.
    _, ybus = two_bus
    p_spec = np.array([0.0, -0.5])
    q_spec = np.zeros(2)
    res = solve_pf(p_spec, q_spec, ybus)

    b = -0.5 * 0.1
    a = 0.5 * (1.0 + np.sqrt(1.0 - 4.0 * b * b))
    assert abs(res.voltages.vm[1] - np.sqrt(a)) < 1e-8
    assert abs(res.voltages.va[1] - np.arctan2(b, a)) < 1e-8
    # lossless line: slack covers the load exactly, plus the line's vars
    assert abs(res.p_slack[0] - 0.5) < 1e-7
    assert abs(res.q_slack[0] - 0.1 * 0.25 / a) < 1e-7
    assert res.max_residual <= 1e-8


def test_no_injection_is_already_solved(two_bus):
    _, ybus = two_bus
    res = solve_pf(np.zeros(2), np.zeros(2), ybus)
    assert res.iterations == 0
    assert np.array_equal(res.voltages.vm, np.ones(2))


def test_repeat_solve_is_bit_identical(three_node):
    _, ybus = three_node
    p = np.zeros(ybus.n_conn)
    q = np.zeros(ybus.n_conn)
    p[ybus.pos("n2", "a")] = -0.3
    q[ybus.pos("n2", "b")] = -0.1
    r1 = solve_pf(p, q, ybus)
    r2 = solve_pf(p, q, ybus)
    assert np.array_equal(r1.voltages.vm, r2.voltages.vm)
    assert np.array_equal(r1.voltages.va, r2.voltages.va)
    assert r1.iterations == r2.iterations


def test_warm_start_converges_immediately(three_node):
    _, ybus = three_node
    p = np.zeros(ybus.n_conn)
    q = np.zeros(ybus.n_conn)
    p[ybus.pos("n2", "c")] = -0.4
    cold = solve_pf(p, q, ybus)
    warm = solve_pf(p, q, ybus, warm_start=cold.voltages)
    assert warm.iterations <= 1
    assert np.allclose(warm.voltages.vm, cold.voltages.vm, atol=1e-8)


def test_newton_matches_generic_root_finder(three_node):
    """scipy.optimize.fsolve on the raw mismatch is an independent oracle."""
    _, ybus = three_node
    ns = ybus.nonslack_pos
    p = np.zeros(ybus.n_conn)
    q = np.zeros(ybus.n_conn)
    p[ybus.pos("n2", "a")] = -0.35
    p[ybus.pos("n2", "b")] = -0.10
    q[ybus.pos("n2", "a")] = -0.12
    res = solve_pf(p, q, ybus, tol=1e-10)

    base = flat_start(ybus)

    def f(x):
        return mismatch(unpack(x, base, ns), p, q, ybus)

    sol = fsolve(f, pack(base, ns), xtol=1e-13)
    assert np.allclose(sol[: ns.size], res.voltages.va[ns], atol=1e-8)
    assert np.allclose(sol[ns.size:], res.voltages.vm[ns], atol=1e-8)


def test_slack_rows_never_move(three_node):
    _, ybus = three_node
    p = np.zeros(ybus.n_conn)
    p[ybus.pos("n2", "a")] = -0.4
    res = solve_pf(p, np.zeros(ybus.n_conn), ybus)
    sl = ybus.slack_pos
    flat = flat_start(ybus)
    assert np.array_equal(res.voltages.vm[sl], flat.vm[sl])
    assert np.array_equal(res.voltages.va[sl], flat.va[sl])


def test_overload_raises_nonconvergence(two_bus):
    # 0.1 p.u. reactance carries at most 5 p.u.; ask for more
    _, ybus = two_bus
    with pytest.raises(NonConvergence) as exc:
        solve_pf(np.array([0.0, -8.0]), np.zeros(2), ybus, max_iter=8)
    err = exc.value
    assert err.iterations == 8
    assert err.residual > 1e-3
    assert len(err.trace) == err.iterations + 1
    assert err.trace[0] == 8.0


def test_power_balance_at_solution(three_node):
    # slack injections close the balance: generation = load + losses > load
    _, ybus = three_node
    p = np.zeros(ybus.n_conn)
    q = np.zeros(ybus.n_conn)
    for ph in "abc":
        p[ybus.pos("n2", ph)] = -0.2
    res = solve_pf(p, q, ybus)
    losses = res.p_slack.sum() + p.sum()
    assert losses > 0.0
    assert losses < 0.2  # sane magnitude for ~1 p.u. of impedance


# ---------------------------------------------------------------- jacobian


def central_difference_jacobian(fun, x, h):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2.0 * h))
    return np.column_stack(cols)


def test_mismatch_jacobian_matches_central_differences(three_node):
    _, ybus = three_node
    ns = ybus.nonslack_pos
    rng = np.random.default_rng(11)
    base = flat_start(ybus)
    p = rng.uniform(-0.3, 0.1, ybus.n_conn)
    q = rng.uniform(-0.1, 0.1, ybus.n_conn)

    def f(x):
        return mismatch(unpack(x, base, ns), p, q, ybus)

    for _ in range(10):
        st_ = base.copy()
        st_.vm[ns] = 1.0 + rng.uniform(-0.05, 0.05, ns.size)
        st_.va[ns] = base.va[ns] + rng.uniform(-0.05, 0.05, ns.size)
        J = mismatch_jacobian(st_, ybus)
        fd = central_difference_jacobian(f, pack(st_, ns), 1e-6)
        rel = np.abs(J - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() < 1e-6


# ---------------------------------------------------------------- sequences


def test_sequence_voltages_match_direct_computation():
    rng = np.random.default_rng(3)
    flat = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
    for _ in range(1000):
        vm = rng.uniform(0.8, 1.2, 3)
        va = flat + rng.uniform(-0.3, 0.3, 3)
        seq = sequence_voltages(vm, va)
        v_neg, v_pos = direct_sequence(vm, va)
        assert abs(seq.v_neg - v_neg) < 1e-12
        assert abs(seq.v_pos - v_pos) < 1e-12
        ref = abs(v_neg) ** 2 / abs(v_pos) ** 2
        assert abs(vuf_squared(seq) - ref) <= 1e-12 * max(1.0, ref)


def test_balanced_triple_is_exactly_zero():
    seq = sequence_voltages(
        np.array([1.0, 1.0, 1.0]),
        np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0]),
    )
    assert seq.v_neg == 0.0 + 0.0j
    assert vuf_squared(seq) == 0.0


def test_pure_negative_sequence_is_degenerate():
    # reversed rotation: the positive-sequence sum cancels exactly
    seq = sequence_voltages(
        np.array([1.0, 1.0, 1.0]),
        np.array([0.0, 2.0 * np.pi / 3.0, -2.0 * np.pi / 3.0]),
    )
    assert seq.v_pos == 0.0 + 0.0j
    with pytest.raises(DegenerateSequence):
        vuf_squared(seq)


def test_sequence_requires_three_phases():
    with pytest.raises(NotThreePhase):
        sequence_voltages(np.ones(2), np.zeros(2))


def test_node_sequence_rejects_partial_nodes(ieee13):
    _, ybus = ieee13
    state = flat_start(ybus)
    with pytest.raises(NotThreePhase, match="bc"):
        node_sequence(state, ybus, "645")
    with pytest.raises(NotThreePhase):
        node_sequence(state, ybus, "nope")


def test_node_sequence_picks_the_right_rows(three_node):
    _, ybus = three_node
    state = flat_start(ybus)
    state.vm[ybus.pos("n2", "b")] = 0.9
    seq = node_sequence(state, ybus, "n2")
    ref_neg, ref_pos = direct_sequence(
        [1.0, 0.9, 1.0],
        [0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0],
    )
    assert abs(seq.v_neg - ref_neg) < 1e-12
    assert abs(seq.v_pos - ref_pos) < 1e-12
    # n1 untouched, still balanced
    assert vuf_squared(node_sequence(state, ybus, "n1")) == 0.0


@settings(deadline=None, max_examples=150)
@given(
    vm=st.tuples(*(st.floats(0.5, 1.5) for _ in range(3))),
    va=st.tuples(*(st.floats(-np.pi, np.pi) for _ in range(3))),
    theta=st.floats(-np.pi, np.pi),
)
def test_vuf_invariant_under_rotation(vm, va, theta):
    vm = np.asarray(vm)
    va = np.asarray(va)
    _, v_pos = direct_sequence(vm, va)
    assume(abs(v_pos) > 1e-6)
    ref = vuf_squared(sequence_voltages(vm, va))
    rot = vuf_squared(sequence_voltages(vm, va + theta))
    assert abs(rot - ref) <= 1e-10 * max(1.0, ref)


@settings(deadline=None, max_examples=150)
@given(
    vm=st.tuples(*(st.floats(0.5, 1.5) for _ in range(3))),
    va=st.tuples(*(st.floats(-np.pi, np.pi) for _ in range(3))),
    scale=st.floats(0.1, 10.0),
)
def test_vuf_invariant_under_scaling(vm, va, scale):
    vm = np.asarray(vm)
    va = np.asarray(va)
    _, v_pos = direct_sequence(vm, va)
    assume(abs(v_pos) > 1e-6)
    ref = vuf_squared(sequence_voltages(vm, va))
    scaled = vuf_squared(sequence_voltages(scale * vm, va))
    assert abs(scaled - ref) <= 1e-9 * max(1.0, ref)


@settings(deadline=None, max_examples=150)
@given(
    vm=st.tuples(*(st.floats(0.5, 1.5) for _ in range(3))),
    va=st.tuples(*(st.floats(-np.pi, np.pi) for _ in range(3))),
)
def test_vuf_invariant_under_cyclic_relabeling(vm, va):
    # shifting every phase one slot multiplies both sequence phasors by a
    # unit-magnitude factor, so the ratio cannot change
    vm = np.asarray(vm)
    va = np.asarray(va)
    _, v_pos = direct_sequence(vm, va)
    assume(abs(v_pos) > 1e-6)
    ref = vuf_squared(sequence_voltages(vm, va))
    rolled = vuf_squared(sequence_voltages(np.roll(vm, 1), np.roll(va, 1)))
    assert abs(rolled - ref) <= 1e-10 * max(1.0, ref)


# ---------------------------------------------------------------- objective


def test_total_vuf_squared_consistent_with_per_node(three_node):
    _, ybus = three_node
    p = np.zeros(ybus.n_conn)
    p[ybus.pos("n2", "a")] = -0.4
    res = solve_pf(p, np.zeros(ybus.n_conn), ybus)
    per_node = sum(
        vuf_squared(node_sequence(res.voltages, ybus, nid))
        for nid in ("n1", "n2")
    )
    total = total_vuf_squared(res.voltages, ybus)
    assert abs(total - per_node) < 1e-15
    assert total > 0.0
    assert total_vuf(res.voltages, ybus) >= np.sqrt(total / 2.0)


def test_vuf_objective_value_and_gradient(three_node):
    _, ybus = three_node
    p = np.zeros(ybus.n_conn)
    q = np.zeros(ybus.n_conn)
    p[ybus.pos("n2", "a")] = -0.35
    q[ybus.pos("n2", "b")] = -0.15
    state = solve_pf(p, q, ybus).voltages

    total, dvm, dva = vuf_objective(state, ybus)
    assert abs(total - total_vuf_squared(state, ybus)) < 1e-15

    h = 1e-6
    for i in range(ybus.n_conn):
        for attr, grad in (("vm", dvm), ("va", dva)):
            hi = state.copy()
            lo = state.copy()
            getattr(hi, attr)[i] += h
            getattr(lo, attr)[i] -= h
            fd = (total_vuf_squared(hi, ybus) - total_vuf_squared(lo, ybus)) / (2.0 * h)
            assert abs(grad[i] - fd) <= 1e-10 + 1e-5 * abs(fd)
