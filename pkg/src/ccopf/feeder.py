"""Three-phase feeder description and nodal admittance assembly.

Units and conventions:
- s_base_kva is the per-phase (per-connection) power base; base_kv is the
  nominal phase-to-neutral voltage of each node in kV.
- Branch r/x matrices are entered in ohms per unit length, referred to the
  from-side node base; b_shunt is total line-charging susceptance in siemens
  per unit length (split half per end when stamping).
- All quantities are converted to per-unit at load time; a branch between
  nodes with different voltage bases is treated as a nominal-ratio
  transformer (the per-unit impedance is base-invariant in that case).
- Absent phases are structural: their admittance rows/columns are exactly
  zero, and they never enter solver state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PHASES = "abc"


class FeederError(ValueError):
    """Raised for malformed or inconsistent feeder descriptions."""


@dataclass(frozen=True)
class PhaseMask:
    """Which of phases (a, b, c) exist at a node or branch."""

    present: tuple[bool, bool, bool]

    def __post_init__(self) -> None:
        if not any(self.present):
            raise FeederError("phase mask must contain at least one phase")

    @classmethod
    def from_string(cls, text: str) -> "PhaseMask":
        letters = set(text)
        if not letters or not letters.issubset(set(PHASES)):
            raise FeederError(f"invalid phase string {text!r} (use subsets of 'abc')")
        return cls(tuple(p in letters for p in PHASES))

    def indices(self) -> list[int]:
        return [i for i, ok in enumerate(self.present) if ok]

    def letters(self) -> str:
        return "".join(p for p, ok in zip(PHASES, self.present) if ok)

    def __contains__(self, phase: str) -> bool:
        return self.present[PHASES.index(phase)]


@dataclass(frozen=True)
class Node:
    id: str
    mask: PhaseMask
    base_kv: float


@dataclass(frozen=True)
class Branch:
    """Branch between two nodes with per-unit 3x3 admittance blocks.

    series_admittance is the inverse of the per-unit series impedance on the
    branch's present phases (zeros elsewhere); shunt_admittance is the total
    per-unit line charging, half of which is stamped at each end.
    """

    from_node: str
    to_node: str
    series_admittance: np.ndarray
    shunt_admittance: np.ndarray
    is_transformer: bool = False

    def phase_indices(self) -> list[int]:
        d = np.abs(np.diagonal(self.series_admittance))
        return [i for i in range(3) if d[i] > 0.0]


@dataclass(frozen=True)
class LoadSpec:
    node: str
    phase: str
    pf: float
    house_id: str
    scale: float = 1.0


@dataclass(frozen=True)
class InverterSpec:
    node: str
    phase: str
    s_rating_kva: float
    house_id: str


@dataclass(frozen=True)
class FeederModel:
    """Validated feeder: nodes (slack first), branches, houses, power base."""

    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    slack_id: str
    loads: tuple[LoadSpec, ...]
    inverters: tuple[InverterSpec, ...]
    s_base_kva: float

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise FeederError(f"unknown node reference {node_id!r}")

    @property
    def house_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for rec in (*self.loads, *self.inverters):
            seen.setdefault(rec.house_id, None)
        return list(seen)


def _parse_matrix(raw: object, what: str) -> np.ndarray:
    m = np.asarray(raw, dtype=float)
    if m.shape != (3, 3):
        raise FeederError(f"{what} must be a 3x3 matrix, got shape {m.shape}")
    return m


def _branch_from_json(raw: dict, nodes: dict[str, Node], s_base_kva: float) -> Branch:
    for key in ("from", "to", "r_matrix", "x_matrix", "length"):
        if key not in raw:
            raise FeederError(f"branch missing required key {key!r}: {raw}")
    fid, tid = str(raw["from"]), str(raw["to"])
    for nid in (fid, tid):
        if nid not in nodes:
            raise FeederError(f"unknown node reference {nid!r} in branch {fid}-{tid}")
    r = _parse_matrix(raw["r_matrix"], f"branch {fid}-{tid} r_matrix")
    x = _parse_matrix(raw["x_matrix"], f"branch {fid}-{tid} x_matrix")
    b = _parse_matrix(raw.get("b_shunt", np.zeros((3, 3))), f"branch {fid}-{tid} b_shunt")
    length = float(raw["length"])
    if length <= 0.0:
        raise FeederError(f"branch {fid}-{tid} has nonpositive length {length}")

    z = (r + 1j * x) * length
    present = [i for i in range(3) if abs(z[i, i]) > 0.0]
    if not present:
        raise FeederError(f"branch {fid}-{tid} has no present phases (zero diagonal impedance)")
    mask_ok = np.zeros((3, 3), dtype=bool)
    mask_ok[np.ix_(present, present)] = True
    if np.any((np.abs(z) > 0.0) & ~mask_ok) or np.any((np.abs(b) > 0.0) & ~mask_ok):
        raise FeederError(
            f"branch {fid}-{tid} couples absent phases (nonzero entry outside phases "
            f"{''.join(PHASES[i] for i in present)!r})"
        )
    for nid in (fid, tid):
        node_phases = set(nodes[nid].mask.indices())
        if not set(present).issubset(node_phases):
            raise FeederError(
                f"branch {fid}-{tid} carries phases absent at node {nid!r}"
            )

    # Impedances to per-unit on the from-side node base, then invert the
    # present-phase submatrix to the series admittance block.
    z_base = nodes[fid].base_kv ** 2 * 1000.0 / s_base_kva
    z_pu = z / z_base
    y_series = np.zeros((3, 3), dtype=complex)
    sub = z_pu[np.ix_(present, present)]
    try:
        y_sub = np.linalg.inv(sub)
    except np.linalg.LinAlgError as exc:
        raise FeederError(f"branch {fid}-{tid} impedance submatrix is singular") from exc
    y_series[np.ix_(present, present)] = y_sub
    y_shunt = 1j * b * length * z_base

    return Branch(
        from_node=fid,
        to_node=tid,
        series_admittance=y_series,
        shunt_admittance=y_shunt,
        is_transformer=bool(raw.get("transformer", False)),
    )


def load_feeder(path: str | Path) -> FeederModel:
    """Load and validate a feeder JSON description.

    Rejects with a diagnostic naming the offending element on schema
    violations, disconnected graphs, nonpositive ratings, bad power factors,
    unknown node references, and houses placed at the slack node.
    """
    path = Path(path)
    if not path.exists():
        raise FeederError(f"feeder file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"feeder file {path} is not valid JSON: {exc}") from exc

    for key in ("s_base_kva", "nodes", "slack", "branches"):
        if key not in raw:
            raise FeederError(f"feeder file missing required key {key!r}")
    s_base_kva = float(raw["s_base_kva"])
    if s_base_kva <= 0.0:
        raise FeederError(f"s_base_kva must be positive, got {s_base_kva}")

    nodes: dict[str, Node] = {}
    for rec in raw["nodes"]:
        nid = str(rec["id"])
        if nid in nodes:
            raise FeederError(f"duplicate node id {nid!r}")
        base_kv = float(rec["base_kv"])
        if base_kv <= 0.0:
            raise FeederError(f"node {nid!r} has nonpositive base_kv {base_kv}")
        nodes[nid] = Node(nid, PhaseMask.from_string(str(rec["phases"])), base_kv)

    slack_id = str(raw["slack"])
    if slack_id not in nodes:
        raise FeederError(f"unknown node reference {slack_id!r} as slack")

    branches = tuple(_branch_from_json(b, nodes, s_base_kva) for b in raw["branches"])

    # Connectivity: every node must reach the slack through some branch.
    adjacency: dict[str, set[str]] = {nid: set() for nid in nodes}
    for br in branches:
        adjacency[br.from_node].add(br.to_node)
        adjacency[br.to_node].add(br.from_node)
    reached = {slack_id}
    stack = [slack_id]
    while stack:
        for nb in adjacency[stack.pop()]:
            if nb not in reached:
                reached.add(nb)
                stack.append(nb)
    unreached = sorted(set(nodes) - reached)
    if unreached:
        raise FeederError(f"disconnected graph: nodes {unreached} do not reach slack {slack_id!r}")

    loads = []
    house_conn: dict[str, tuple[str, str]] = {}
    for rec in raw.get("loads", []):
        nid, phase = str(rec["node"]), str(rec["phase"])
        if nid not in nodes:
            raise FeederError(f"unknown node reference {nid!r} in load {rec.get('house_id')!r}")
        if phase not in nodes[nid].mask:
            raise FeederError(f"load {rec.get('house_id')!r} on absent phase {phase!r} of node {nid!r}")
        if nid == slack_id:
            raise FeederError(f"load {rec.get('house_id')!r} placed at slack node {nid!r}")
        pf = float(rec["pf"])
        if not 0.0 < pf <= 1.0:
            raise FeederError(f"load {rec.get('house_id')!r} power factor {pf} outside (0, 1]")
        hid = str(rec["house_id"])
        if any(ld.house_id == hid for ld in loads):
            raise FeederError(f"duplicate load entry for house {hid!r}")
        house_conn.setdefault(hid, (nid, phase))
        if house_conn[hid] != (nid, phase):
            raise FeederError(f"house {hid!r} referenced at conflicting connections")
        loads.append(LoadSpec(nid, phase, pf, hid, float(rec.get("scale", 1.0))))

    inverters = []
    for rec in raw.get("inverters", []):
        nid, phase = str(rec["node"]), str(rec["phase"])
        if nid not in nodes:
            raise FeederError(f"unknown node reference {nid!r} in inverter {rec.get('house_id')!r}")
        if phase not in nodes[nid].mask:
            raise FeederError(f"inverter {rec.get('house_id')!r} on absent phase {phase!r} of node {nid!r}")
        if nid == slack_id:
            raise FeederError(f"inverter {rec.get('house_id')!r} placed at slack node {nid!r}")
        rating = float(rec["s_rating_kva"])
        if rating <= 0.0:
            raise FeederError(f"inverter {rec.get('house_id')!r} has nonpositive rating {rating}")
        hid = str(rec["house_id"])
        if any(iv.house_id == hid for iv in inverters):
            raise FeederError(f"duplicate inverter entry for house {hid!r}")
        if hid in house_conn and house_conn[hid] != (nid, phase):
            raise FeederError(f"house {hid!r} referenced at conflicting connections")
        house_conn.setdefault(hid, (nid, phase))
        inverters.append(InverterSpec(nid, phase, rating, hid))

    ordered = [nodes[slack_id]] + [n for nid, n in nodes.items() if nid != slack_id]
    return FeederModel(
        nodes=tuple(ordered),
        branches=branches,
        slack_id=slack_id,
        loads=tuple(loads),
        inverters=tuple(inverters),
        s_base_kva=s_base_kva,
    )


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Full nodal admittance (G + jB) plus the compressed present-phase view.

    G and B span all 3(n+1) (node, phase) slots with zero rows/columns for
    absent phases; the compressed attributes cover present connections only
    and are what the power flow consumes.
    """

    G: np.ndarray
    B: np.ndarray
    index: dict[tuple[str, str], int]

    # Compressed view over present connections, in node-major phase order.
    conn_rows: np.ndarray = field(repr=False)
    conn_labels: tuple[str, ...] = field(repr=False)
    conn_node: tuple[str, ...] = field(repr=False)
    conn_phase: tuple[str, ...] = field(repr=False)
    Yc: np.ndarray = field(repr=False)
    slack_pos: np.ndarray = field(repr=False)
    nonslack_pos: np.ndarray = field(repr=False)
    three_phase_groups: tuple[tuple[str, tuple[int, int, int]], ...] = field(repr=False)

    @property
    def n_conn(self) -> int:
        return len(self.conn_labels)

    def pos(self, node_id: str, phase: str) -> int:
        """Compressed connection position of (node, phase)."""
        row = self.index.get((node_id, phase))
        if row is None:
            raise FeederError(f"unknown connection {node_id}.{phase}")
        hits = np.nonzero(self.conn_rows == row)[0]
        if hits.size == 0:
            raise FeederError(f"connection {node_id}.{phase} is an absent phase")
        return int(hits[0])


def assemble_admittance(model: FeederModel) -> AdmittanceMatrix:
    """Stamp branch admittances into the full nodal matrix.

    Diagonal block (i,i) accumulates series plus half-shunt of incident
    branches; off-diagonal block (i,k) is minus the total series admittance
    between i and k.
    """
    node_idx = {n.id: i for i, n in enumerate(model.nodes)}
    dim = 3 * len(model.nodes)
    Y = np.zeros((dim, dim), dtype=complex)

    for br in model.branches:
        i, k = node_idx[br.from_node], node_idx[br.to_node]
        rows_i = np.arange(3 * i, 3 * i + 3)
        rows_k = np.arange(3 * k, 3 * k + 3)
        ys, ysh = br.series_admittance, br.shunt_admittance
        Y[np.ix_(rows_i, rows_i)] += ys + ysh / 2.0
        Y[np.ix_(rows_k, rows_k)] += ys + ysh / 2.0
        Y[np.ix_(rows_i, rows_k)] -= ys
        Y[np.ix_(rows_k, rows_i)] -= ys

    index = {
        (n.id, p): 3 * node_idx[n.id] + pi
        for n in model.nodes
        for pi, p in enumerate(PHASES)
    }

    conn_rows, labels, conn_node, conn_phase = [], [], [], []
    for n in model.nodes:
        for pi in n.mask.indices():
            conn_rows.append(3 * node_idx[n.id] + pi)
            labels.append(f"{n.id}.{PHASES[pi]}")
            conn_node.append(n.id)
            conn_phase.append(PHASES[pi])
    conn_rows = np.asarray(conn_rows, dtype=int)
    Yc = Y[np.ix_(conn_rows, conn_rows)]

    is_slack = np.asarray([nid == model.slack_id for nid in conn_node])
    slack_pos = np.nonzero(is_slack)[0]
    nonslack_pos = np.nonzero(~is_slack)[0]

    groups = []
    pos_of = {lab: i for i, lab in enumerate(labels)}
    for n in model.nodes:
        if n.id != model.slack_id and all(n.mask.present):
            groups.append((n.id, tuple(pos_of[f"{n.id}.{p}"] for p in PHASES)))

    return AdmittanceMatrix(
        G=Y.real,
        B=Y.imag,
        index=index,
        conn_rows=conn_rows,
        conn_labels=tuple(labels),
        conn_node=tuple(conn_node),
        conn_phase=tuple(conn_phase),
        Yc=Yc,
        slack_pos=slack_pos,
        nonslack_pos=nonslack_pos,
        three_phase_groups=tuple(groups),
    )
