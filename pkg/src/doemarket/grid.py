"""Radial feeder model and separable voltage-constraint rows.

Squared nodal voltages are linearized around the no-injection point:

    v_j^2 = V0^2 + 2 * sum_i (R[j,i] * p_i + X[j,i] * q_i)    (per-unit)

where R[j,i] (X[j,i]) is the sum of line resistances (reactances) on the
common path from the head node to node j and to prosumer i's node.  Each
constrained node contributes one upper and one lower band row, and every
row splits into per-prosumer affine contributions, which is what lets
the global limits be decomposed into per-prosumer envelopes.

Powers cross this API in kW/kVar; rows and bounds are in squared-pu
voltage units.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Line:
    node_from: str
    node_to: str
    resistance_ohm: float
    reactance_ohm: float


class FeederTopology:
    """Tree-shaped feeder rooted at a voltage-reference head node.

    nodes: node labels; lines: (from, to, r_ohm, x_ohm) tuples or Line;
    prosumer_nodes: label of the node each prosumer connects to.
    """

    def __init__(self, nodes, head, lines, base_voltage_kv, base_power_kva,
                 prosumer_nodes, v0=1.0):
        self.nodes = [str(n) for n in nodes]
        self.head = str(head)
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node labels")
        if self.head not in self.nodes:
            raise ValueError(f"head node {self.head!r} not in node list")
        self.lines = []
        for ln in lines:
            if not isinstance(ln, Line):
                ln = Line(str(ln[0]), str(ln[1]), float(ln[2]), float(ln[3]))
            if ln.resistance_ohm < 0 or ln.reactance_ohm < 0:
                raise ValueError("line impedances must be nonnegative")
            if ln.node_from not in self.nodes or ln.node_to not in self.nodes:
                raise ValueError(f"line references unknown node: {ln}")
            self.lines.append(ln)
        if base_voltage_kv <= 0 or base_power_kva <= 0:
            raise ValueError("bases must be positive")
        self.base_voltage_kv = float(base_voltage_kv)
        self.base_power_kva = float(base_power_kva)
        self.v0 = float(v0)
        self.prosumer_nodes = [str(n) for n in prosumer_nodes]
        for n in self.prosumer_nodes:
            if n not in self.nodes:
                raise ValueError(f"prosumer node {n!r} not in node list")
            if n == self.head:
                raise ValueError("prosumers cannot connect to the head node")
        self._index = {n: k for k, n in enumerate(self.nodes)}
        self._parent = self._validate_tree()

    def _validate_tree(self):
        n = len(self.nodes)
        if len(self.lines) != n - 1:
            raise ValueError(
                f"a tree on {n} nodes needs {n - 1} lines, got {len(self.lines)} "
                "(cycle or missing line)")
        adj = {k: [] for k in range(n)}
        for li, ln in enumerate(self.lines):
            a, b = self._index[ln.node_from], self._index[ln.node_to]
            adj[a].append((b, li))
            adj[b].append((a, li))
        parent = {self._index[self.head]: (None, None)}
        stack = [self._index[self.head]]
        while stack:
            u = stack.pop()
            for v, li in adj[u]:
                if v in parent:
                    continue
                parent[v] = (u, li)
                stack.append(v)
        if len(parent) != n:
            missing = [lbl for lbl, k in self._index.items() if k not in parent]
            raise ValueError(f"nodes unreachable from head: {missing}")
        return parent

    @property
    def n_prosumers(self):
        return len(self.prosumer_nodes)

    def node_index(self, label):
        return self._index[str(label)]

    def impedance_base_ohm(self):
        # Z_base = V_base^2 / S_base with V in kV and S in kVA
        return 1000.0 * self.base_voltage_kv ** 2 / self.base_power_kva


@dataclass
class SensitivityMatrices:
    """Common-path impedance sums, per-unit.

    R_nodes/X_nodes are node x node; R/X restrict columns to prosumer
    locations (node x prosumer).  Carries the feeder metadata needed by
    downstream consumers.
    """

    R_nodes: np.ndarray
    X_nodes: np.ndarray
    R: np.ndarray
    X: np.ndarray
    nodes: list
    head: str
    prosumer_nodes: list
    v0: float
    base_power_kva: float
    base_voltage_kv: float


def build_sensitivities(topology):
    """Common-path R/X sums for every (node, prosumer) pair, in pu."""
    n = len(topology.nodes)
    zbase = topology.impedance_base_ohm()

    r_cum = np.zeros(n)
    x_cum = np.zeros(n)
    depth = np.zeros(n, dtype=int)
    # _parent preserves discovery order, so parents precede children
    for v, (u, li) in topology._parent.items():
        if u is None:
            continue
        ln = topology.lines[li]
        r_cum[v] = r_cum[u] + ln.resistance_ohm / zbase
        x_cum[v] = x_cum[u] + ln.reactance_ohm / zbase
        depth[v] = depth[u] + 1

    def lca(a, b):
        while depth[a] > depth[b]:
            a = topology._parent[a][0]
        while depth[b] > depth[a]:
            b = topology._parent[b][0]
        while a != b:
            a = topology._parent[a][0]
            b = topology._parent[b][0]
        return a

    Rn = np.zeros((n, n))
    Xn = np.zeros((n, n))
    for j in range(n):
        for k in range(j, n):
            anc = lca(j, k)
            Rn[j, k] = Rn[k, j] = r_cum[anc]
            Xn[j, k] = Xn[k, j] = x_cum[anc]
    cols = [topology.node_index(p) for p in topology.prosumer_nodes]
    return SensitivityMatrices(
        R_nodes=Rn, X_nodes=Xn,
        R=Rn[:, cols].copy(), X=Xn[:, cols].copy(),
        nodes=list(topology.nodes), head=topology.head,
        prosumer_nodes=list(topology.prosumer_nodes),
        v0=topology.v0, base_power_kva=topology.base_power_kva,
        base_voltage_kv=topology.base_voltage_kv)


def voltage_profile(sens, p_kw, q_kvar):
    """Per-node voltage magnitudes (pu) from prosumer injections (kW/kVar)."""
    p = np.asarray(p_kw, dtype=float) / sens.base_power_kva
    q = np.asarray(q_kvar, dtype=float) / sens.base_power_kva
    if p.shape != (len(sens.prosumer_nodes),) or q.shape != p.shape:
        raise ValueError("injection vectors must have one entry per prosumer")
    v2 = sens.v0 ** 2 + 2.0 * (sens.R @ p + sens.X @ q)
    if np.any(v2 <= 0):
        bad = sens.nodes[int(np.argmin(v2))]
        raise ValueError(
            f"squared voltage nonpositive at node {bad}: outside model validity")
    return np.sqrt(v2)


@dataclass
class ConstraintSet:
    """Per-time-step band rows split into per-prosumer contributions.

    coeff[i] is the M x 2 block mapping prosumer i's (p_kw, q_kvar) to
    its row contribution; nu[t] the row bounds.  Rows come in
    (upper, lower) pairs per constrained node: upper rows carry
    +2(Rp + Xq)/S_base, lower rows the negation.
    """

    coeff: np.ndarray          # (N, M, 2)
    nu: np.ndarray             # (T, M)
    labels: list               # [(node_label, "upper"|"lower")] length M
    constrained_nodes: list
    horizon: int

    @property
    def n_rows(self):
        return self.coeff.shape[1]

    @property
    def n_prosumers(self):
        return self.coeff.shape[0]

    def aggregate_rows(self, P_t, Q_t):
        """Sum of all prosumer contributions at one time step -> (M,)."""
        pq = np.stack([np.asarray(P_t, dtype=float),
                       np.asarray(Q_t, dtype=float)], axis=1)
        return np.einsum("imk,ik->m", self.coeff, pq)


def assemble_constraints(sens, v_min, v_max, horizon, constrained_nodes=None):
    """Band rows v_min <= v_j <= v_max as squared-voltage inequalities.

    Upper row per node j: +2(R[j,:]p + X[j,:]q) <= v_max^2 - V0^2;
    lower row: -2(...) <= V0^2 - v_min^2.  Constant across t by default;
    constrained_nodes defaults to every non-head node.
    """
    if not (0 < v_min < sens.v0 < v_max):
        raise ValueError("need 0 < v_min < V0 < v_max")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if constrained_nodes is None:
        constrained_nodes = [nd for nd in sens.nodes if nd != sens.head]
    else:
        constrained_nodes = [str(nd) for nd in constrained_nodes]
        for nd in constrained_nodes:
            if nd not in sens.nodes:
                raise ValueError(f"unknown constrained node {nd!r}")
    node_pos = {nd: k for k, nd in enumerate(sens.nodes)}
    N = len(sens.prosumer_nodes)
    M = 2 * len(constrained_nodes)
    coeff = np.zeros((N, M, 2))
    labels = []
    ub = v_max ** 2 - sens.v0 ** 2
    lb = sens.v0 ** 2 - v_min ** 2
    nu_row = np.empty(M)
    for r, nd in enumerate(constrained_nodes):
        j = node_pos[nd]
        row_p = 2.0 * sens.R[j, :] / sens.base_power_kva
        row_q = 2.0 * sens.X[j, :] / sens.base_power_kva
        coeff[:, 2 * r, 0] = row_p
        coeff[:, 2 * r, 1] = row_q
        coeff[:, 2 * r + 1, 0] = -row_p
        coeff[:, 2 * r + 1, 1] = -row_q
        labels.append((nd, "upper"))
        labels.append((nd, "lower"))
        nu_row[2 * r] = ub
        nu_row[2 * r + 1] = lb
    nu = np.tile(nu_row, (horizon, 1))
    return ConstraintSet(coeff=coeff, nu=nu, labels=labels,
                         constrained_nodes=constrained_nodes, horizon=horizon)


def evaluate_g(cs, i, t, p_kw, q_kvar):
    """Prosumer i's contribution vector to the t-th constraint rows."""
    if not 0 <= i < cs.n_prosumers:
        raise IndexError(f"prosumer index {i} out of range")
    if not 0 <= t < cs.horizon:
        raise IndexError(f"time step {t} out of range")
    return cs.coeff[i] @ np.array([float(p_kw), float(q_kvar)])


def row_scales(cs):
    """Largest sensitivity per row across prosumers (1.0 for zero rows).

    The optimizers divide each row by this so the row data is O(1)
    against O(10) power variables; all public quantities stay in the
    raw pu^2 row units.
    """
    if cs.n_prosumers == 0:
        return np.ones(cs.n_rows)
    s = np.abs(np.asarray(cs.coeff)).max(axis=(0, 2))
    return np.where(s > 0.0, s, 1.0)
