import json

import numpy as np
import pytest

from ccopf import (
    DaySeries,
    ScenarioSet,
    assemble_admittance,
    load_feeder,
    resolve_feeder_path,
    synthesize,
)


def write_feeder(path, doc):
    path.write_text(json.dumps(doc))
    return load_feeder(path)


def two_bus_doc():
    """Single-phase pair: slack -- j0.1 p.u. -- load node (1 kV, 1 MVA base)."""
    return {
        "s_base_kva": 1000.0,
        "slack": "s",
        "nodes": [
            {"id": "s", "phases": "a", "base_kv": 1.0},
            {"id": "m", "phases": "a", "base_kv": 1.0},
        ],
        "branches": [
            {"from": "s", "to": "m", "length": 1.0,
             "r_matrix": [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
             "x_matrix": [[0.1, 0, 0], [0, 0, 0], [0, 0, 0]]},
        ],
    }


def _diag3(v):
    return [[v if i == j else 0.0 for j in range(3)] for i in range(3)]


def _mat3(diag, mutual):
    return [[diag if i == j else mutual for j in range(3)] for i in range(3)]


def three_node_doc(*, unbalanced=True, n_houses=2):
    """Slack + two three-phase nodes in a chain, houses on node n2.

    With unbalanced=True the second line section uses asymmetric phase
    impedances so balanced injections still produce voltage unbalance.
    """
    if unbalanced:
        r2 = [[0.30, 0.05, 0.04], [0.05, 0.40, 0.06], [0.04, 0.06, 0.55]]
        x2 = [[0.60, 0.20, 0.15], [0.20, 0.75, 0.18], [0.15, 0.18, 0.95]]
    else:
        r2 = _mat3(0.40, 0.05)
        x2 = _mat3(0.75, 0.18)
    placements = [("g1", "n2", "a"), ("g2", "n2", "b"), ("g3", "n2", "c")]
    houses = placements[:n_houses]
    return {
        "s_base_kva": 1000.0,
        "slack": "n0",
        "nodes": [
            {"id": "n0", "phases": "abc", "base_kv": 2.4},
            {"id": "n1", "phases": "abc", "base_kv": 2.4},
            {"id": "n2", "phases": "abc", "base_kv": 2.4},
        ],
        "branches": [
            {"from": "n0", "to": "n1", "length": 1.0,
             "r_matrix": _mat3(0.35, 0.11), "x_matrix": _mat3(0.7, 0.3)},
            {"from": "n1", "to": "n2", "length": 1.0,
             "r_matrix": r2, "x_matrix": x2},
        ],
        "loads": [{"node": n, "phase": p, "pf": 0.9, "house_id": h}
                  for h, n, p in houses],
        "inverters": [{"node": n, "phase": p, "s_rating_kva": 10.0,
                       "house_id": h} for h, n, p in houses],
    }


def constant_scenarios(house_ids, p_gen_kw, p_load_kw, m=4):
    """Degenerate set: every sample identical."""
    h = len(house_ids)
    return ScenarioSet(
        house_ids=tuple(house_ids),
        p_gen=np.full((m, h), float(p_gen_kw)),
        p_load=np.full((m, h), float(p_load_kw)),
    )


def handmade_voltage_report(column, nom=1.0):
    """Single-connection report with a prescribed magnitude column."""
    from ccopf import EvaluationReport, OperatingPoint, VoltageState

    column = np.asarray(column, dtype=float)[:, None]
    m = column.shape[0]
    point = OperatingPoint(
        q_setpoints=np.zeros(0),
        voltages=VoltageState(np.array([1.0, nom]), np.zeros(2)),
        p_slack=np.zeros(1), q_slack=np.zeros(1), objective=0.0)
    report = EvaluationReport(
        m=m, capping=False, v_limits=(0.95, 1.05),
        conn_labels=("x.a",), nonslack_pos=np.array([1]),
        inverter_ids=(), vmag=column, vuf_sum=np.zeros(m),
        prob_v_upper=np.zeros(1), prob_v_lower=np.zeros(1),
        prob_q_upper=np.zeros(0), prob_q_lower=np.zeros(0),
        q_upper_margin=np.zeros((m, 0)), q_lower_margin=np.zeros((m, 0)),
        failed_samples=(), cap_sample=np.empty(0, dtype=int),
        cap_inverter=np.empty(0, dtype=int),
        cap_requested=np.empty(0), cap_applied=np.empty(0))
    return point, report


@pytest.fixture(scope="session")
def ieee13():
    feeder = load_feeder(resolve_feeder_path("ieee13"))
    return feeder, assemble_admittance(feeder)


@pytest.fixture(scope="session")
def synth_series_20x():
    """15 houses x 25 days of synthetic data scaled into the stressed regime."""
    series = synthesize(15, 25, 7)
    return DaySeries(series.house_ids, series.days,
                     series.p_gen * 20.0, series.p_load * 20.0)


@pytest.fixture()
def two_bus(tmp_path):
    feeder = write_feeder(tmp_path / "two_bus.json", two_bus_doc())
    return feeder, assemble_admittance(feeder)


@pytest.fixture()
def three_node(tmp_path):
    feeder = write_feeder(tmp_path / "three_node.json", three_node_doc())
    return feeder, assemble_admittance(feeder)


@pytest.fixture()
def three_node_balanced(tmp_path):
    doc = three_node_doc(unbalanced=False, n_houses=3)
    feeder = write_feeder(tmp_path / "three_node_balanced.json", doc)
    return feeder, assemble_admittance(feeder)
