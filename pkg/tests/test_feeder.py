import json

import numpy as np
import pytest

from ccopf import FeederError, assemble_admittance, load_feeder

from conftest import three_node_doc, two_bus_doc, write_feeder


def test_packaged_feeder_structure(ieee13):
    feeder, ybus = ieee13
    assert feeder.slack_id == "650"
    assert feeder.node_ids[0] == "650"
    assert len(feeder.nodes) == 13
    assert len(feeder.loads) == 15
    assert len(feeder.inverters) == 15
    assert feeder.house_ids == [f"h{k:02d}" for k in range(1, 16)]
    # 8 three-phase nodes, 3 two-phase, 2 single-phase
    assert ybus.n_conn == 8 * 3 + 3 * 2 + 2 * 1
    assert ybus.slack_pos.tolist() == [0, 1, 2]


def test_admittance_is_symmetric(ieee13):
    _, ybus = ieee13
    assert np.allclose(ybus.Yc, ybus.Yc.T, atol=1e-12)


def test_absent_phases_have_no_connections(ieee13):
    _, ybus = ieee13
    assert "611.a" not in ybus.conn_labels
    assert "611.b" not in ybus.conn_labels
    assert "645.a" not in ybus.conn_labels
    assert ybus.pos("611", "c") >= 0
    with pytest.raises(FeederError, match="absent"):
        ybus.pos("611", "a")


def test_three_phase_groups(ieee13):
    _, ybus = ieee13
    ids = [g[0] for g in ybus.three_phase_groups]
    assert ids == ["632", "633", "634", "671", "680", "692", "675"]
    for _, pos in ybus.three_phase_groups:
        assert len(pos) == 3


def test_shunt_halves_stamped(tmp_path):
    doc = two_bus_doc()
    doc["branches"][0]["b_shunt"] = [[2e-4, 0, 0], [0, 0, 0], [0, 0, 0]]
    feeder = write_feeder(tmp_path / "f.json", doc)
    ybus = assemble_admittance(feeder)
    # z_base is 1 ohm here, so b_pu = 2e-4 total, 1e-4 at each end
    ys = 1.0 / (1j * 0.1)
    assert ybus.Yc[0, 0] == pytest.approx(ys + 1j * 1e-4, rel=1e-12)
    assert ybus.Yc[0, 1] == pytest.approx(-ys, rel=1e-12)


def test_missing_key_rejected(tmp_path):
    doc = two_bus_doc()
    del doc["slack"]
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="slack"):
        load_feeder(p)


def test_unknown_branch_node_rejected(tmp_path):
    doc = two_bus_doc()
    doc["branches"][0]["to"] = "nope"
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="nope"):
        load_feeder(p)


def test_branch_coupling_absent_phase_rejected(tmp_path):
    doc = two_bus_doc()
    # mutual coupling to phase b, which has zero series impedance
    doc["branches"][0]["x_matrix"][0][1] = 0.05
    doc["branches"][0]["x_matrix"][1][0] = 0.05
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="couples absent phases"):
        load_feeder(p)


def test_branch_phase_absent_at_endpoint_rejected(tmp_path):
    doc = three_node_doc()
    doc["nodes"][2]["phases"] = "ab"
    doc["loads"] = []
    doc["inverters"] = []
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="absent at node"):
        load_feeder(p)


def test_disconnected_graph_rejected(tmp_path):
    doc = three_node_doc()
    doc["branches"] = doc["branches"][:1]
    doc["loads"] = []
    doc["inverters"] = []
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="disconnected"):
        load_feeder(p)


def test_bad_power_factor_rejected(tmp_path):
    doc = three_node_doc()
    doc["loads"][0]["pf"] = 1.4
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="power factor"):
        load_feeder(p)


def test_house_at_slack_rejected(tmp_path):
    doc = three_node_doc()
    doc["loads"][0]["node"] = "n0"
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="slack"):
        load_feeder(p)


def test_duplicate_house_rejected(tmp_path):
    doc = three_node_doc()
    doc["loads"].append(dict(doc["loads"][0]))
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="duplicate"):
        load_feeder(p)


def test_conflicting_house_connection_rejected(tmp_path):
    doc = three_node_doc()
    doc["inverters"][0]["phase"] = "c"
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="conflicting"):
        load_feeder(p)


def test_load_on_absent_phase_rejected(tmp_path):
    doc = three_node_doc()
    doc["nodes"][2]["phases"] = "ab"
    doc["branches"][1]["r_matrix"][2] = [0.0, 0.0, 0.0]
    doc["branches"][1]["x_matrix"][2] = [0.0, 0.0, 0.0]
    for row in (0, 1):
        doc["branches"][1]["r_matrix"][row][2] = 0.0
        doc["branches"][1]["x_matrix"][row][2] = 0.0
    doc["loads"] = [{"node": "n2", "phase": "c", "pf": 0.9, "house_id": "g9"}]
    doc["inverters"] = []
    p = tmp_path / "f.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FeederError, match="absent phase"):
        load_feeder(p)
