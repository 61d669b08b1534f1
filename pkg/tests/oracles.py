"""Independent oracles used by the test suite.

Everything here is deliberately written against the raw math, not the
package implementation: small QPs are minimized by enumerating active
sets, feeder voltages come from a nonlinear AC power-flow solve on the
bus-injection equations, and search-based oracles brute-force low
dimensional decision spaces.
"""

import itertools

import numpy as np
import scipy.optimize


def enumerate_qp(P, c, A_eq=None, b_eq=None, A_in=None, b_in=None,
                 lower=None, upper=None):
    """Global optimum of a strictly convex QP by active-set enumeration.

    Finite bounds are folded into inequality rows (-x <= -l, x <= u).
    Every subset of rows is treated as active and its equality KKT
    system solved exactly; the candidate that is primal feasible with
    nonnegative subset duals is the optimum.

    Returns dict with x, eq_duals, row_duals (ineq rows then lower rows
    then upper rows), objective; None if no subset certifies.
    """
    P = np.asarray(P, dtype=float)
    c = np.asarray(c, dtype=float)
    n = P.shape[0]
    A = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    rows = []
    rhs = []
    if A_in is not None:
        for r, v in zip(np.asarray(A_in, dtype=float), np.asarray(b_in, dtype=float)):
            rows.append(r)
            rhs.append(v)
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    lo_rows = [i for i in range(n) if np.isfinite(lo[i])]
    up_rows = [i for i in range(n) if np.isfinite(hi[i])]
    for i in lo_rows:
        e = np.zeros(n)
        e[i] = -1.0
        rows.append(e)
        rhs.append(-lo[i])
    for i in up_rows:
        e = np.zeros(n)
        e[i] = 1.0
        rows.append(e)
        rhs.append(hi[i])
    G = np.array(rows) if rows else np.zeros((0, n))
    h = np.array(rhs)
    m = G.shape[0]
    me = A.shape[0]

    best = None
    for subset in itertools.chain.from_iterable(
            itertools.combinations(range(m), k) for k in range(min(m, n - me) + 1)):
        S = list(subset)
        GS = G[S]
        k = len(S)
        dim = n + me + k
        K = np.zeros((dim, dim))
        K[:n, :n] = P
        K[:n, n:n + me] = A.T
        K[n:n + me, :n] = A
        K[:n, n + me:] = GS.T
        K[n + me:, :n] = GS
        r = np.concatenate([-c, b, h[S]])
        try:
            sol = np.linalg.solve(K, r)
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        y = sol[n:n + me]
        zS = sol[n + me:]
        if k and zS.min() < -1e-9:
            continue
        if m and (G @ x - h).max() > 1e-9:
            continue
        if me and np.abs(A @ x - b).max() > 1e-9:
            continue
        obj = 0.5 * x @ P @ x + c @ x
        if best is None or obj < best["objective"] - 1e-12:
            z = np.zeros(m)
            z[S] = np.maximum(zS, 0.0)
            best = {"x": x, "eq_duals": y, "row_duals": z, "objective": obj,
                    "n_ineq": m - len(lo_rows) - len(up_rows),
                    "lower_rows": lo_rows, "upper_rows": up_rows}
    return best


def make_solver_corpus(seed=20240801, count=100):
    """Seeded corpus of small feasible strictly convex QPs (<= 8 vars).

    Each entry is a dict of constructor arguments; feasibility is by
    construction (constraints anchored at a sampled interior point).
    """
    rng = np.random.default_rng(seed)
    corpus = []
    while len(corpus) < count:
        n = int(rng.integers(1, 9))
        me = int(rng.integers(0, min(3, n)))
        mi = int(rng.integers(0, 7))
        M = rng.normal(size=(n, n))
        P = M @ M.T + np.diag(rng.uniform(0.05, 1.0, size=n))
        c = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        x0 = rng.normal(size=n)
        args = {"objective_matrix": P, "objective_vector": c}
        if me:
            Aeq = rng.normal(size=(me, n))
            args["eq_matrix"] = Aeq
            args["eq_rhs"] = Aeq @ x0
        if mi:
            Ain = rng.normal(size=(mi, n))
            args["ineq_matrix"] = Ain
            args["ineq_rhs"] = Ain @ x0 + rng.uniform(0.0, 1.5, size=mi)
        style = rng.integers(0, 3)
        if style == 1:
            args["lower"] = x0 - rng.uniform(0.05, 2.0, size=n)
            args["upper"] = x0 + rng.uniform(0.05, 2.0, size=n)
        elif style == 2:
            lo = np.where(rng.random(n) < 0.5, x0 - rng.uniform(0.05, 2.0, size=n), -np.inf)
            hi = np.where(rng.random(n) < 0.5, x0 + rng.uniform(0.05, 2.0, size=n), np.inf)
            args["lower"] = lo
            args["upper"] = hi
        n_rows = mi + (np.isfinite(args.get("lower", np.full(n, -np.inf))).sum()
                       + np.isfinite(args.get("upper", np.full(n, np.inf))).sum())
        if n_rows > 12:
            continue
        corpus.append(args)
    return corpus


def ac_power_flow(n_nodes, lines, head, v0, p_pu, q_pu, tol=1e-12):
    """Nonlinear AC power flow on a feeder via Newton-type root finding.

    lines: iterable of (from, to, r_pu, x_pu); p_pu/q_pu: net injections
    per node in per-unit (export positive, head entry ignored).  Solves
    S_j = V_j * conj((Y V)_j) for the non-head complex voltages with the
    head pinned at v0, using the bus-admittance form so it shares no
    code or linearization with the model under test.

    Returns voltage magnitudes per node (pu).
    """
    Y = np.zeros((n_nodes, n_nodes), dtype=complex)
    for (a, bnode, r, x) in lines:
        y = 1.0 / complex(r, x)
        Y[a, a] += y
        Y[bnode, bnode] += y
        Y[a, bnode] -= y
        Y[bnode, a] -= y
    others = [j for j in range(n_nodes) if j != head]
    target = np.asarray(p_pu, dtype=float) + 1j * np.asarray(q_pu, dtype=float)

    def residual(flat):
        V = np.empty(n_nodes, dtype=complex)
        V[head] = v0
        V[others] = flat[:len(others)] + 1j * flat[len(others):]
        S = V * np.conj(Y @ V)
        mis = S[others] - target[others]
        return np.concatenate([mis.real, mis.imag])

    start = np.concatenate([np.full(len(others), float(v0)),
                            np.zeros(len(others))])
    sol = scipy.optimize.root(residual, start, method="hybr", tol=tol)
    if not sol.success and np.abs(residual(sol.x)).max() > 1e-9:
        raise RuntimeError(f"power-flow oracle failed: {sol.message}")
    V = np.empty(n_nodes, dtype=complex)
    V[head] = v0
    V[others] = sol.x[:len(others)] + 1j * sol.x[len(others):]
    return np.abs(V)
