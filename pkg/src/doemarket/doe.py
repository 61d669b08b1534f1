"""Operating-envelope allocation by right-hand-side decomposition.

The grid constraints bind only through aggregate rows g(p, q) <= nu(t).
Splitting each right-hand side as nu(t) = sum_i w_i(t) hands every
prosumer a private envelope {(p, q) : g_i(p, q) <= w_i(t)} whose joint
satisfaction implies the global constraint.  The split maximizes the
potential active-power injection with a small pull toward the equal
share Ebar = nu / N:

    max  sum_i p_i - eps * ||w - Ebar||^2
    s.t. g_i(p_i, q_i) <= w_i,  sum_i w_i = nu(t),
         0 <= p_i <= p_upper_i, q in inverter box.

The p >= 0 restriction keeps the sizing problem convex (the injection
credit saturates at zero); import capability is still granted because
w_i bounds both voltage rows.  The squared regularizer (in place of the
norm) keeps it a QP with the same Ebar-closest selection; internally the
rows are rescaled so each row's largest sensitivity is one, which also
makes the pull toward Ebar act in those power-like units.  Shares may be
negative: one prosumer can absorb another's constraint burden.  Each
time step is sized independently.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .grid import evaluate_g, row_scales
from .solver import QuadraticProgram, SolveStatus, SolverConfig, solve_qp


class AllocationFailure(RuntimeError):
    pass


@dataclass
class DoeAllocation:
    """Per-prosumer envelope shares w (N, M, T) with sum_i w_i = nu."""

    w: np.ndarray               # (N, M, T) constraint-row units
    equality_index: np.ndarray  # (N, M, T), each slice nu(t) / N
    epsilon: float

    @property
    def n_prosumers(self):
        return self.w.shape[0]

    @property
    def n_rows(self):
        return self.w.shape[1]

    @property
    def horizon(self):
        return self.w.shape[2]


def allocate_doe(cs, specs, epsilon=1e-3, cfg=None):
    """Size every prosumer's envelope for each time step.

    specs supplies the inverter limits (p_upper, q bounds); cs carries
    the sensitivity rows and per-step headroom nu.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    N, M, T = cs.n_prosumers, cs.n_rows, cs.horizon
    if len(specs) != N:
        raise ValueError(f"expected {N} prosumer specs, got {len(specs)}")
    cfg = cfg or SolverConfig()

    # solve in units where every row's largest sensitivity is one: the
    # raw rows mix O(1e-4) sensitivities with O(10) power variables and
    # leave the row duals O(1e4), which stalls the interior point
    scale = row_scales(cs)

    nv = N * M + 2 * N
    p0 = N * M          # first p column
    q0 = N * M + N      # first q column
    P = np.zeros((nv, nv))
    P[np.arange(N * M), np.arange(N * M)] = 2.0 * epsilon
    Aeq = np.zeros((M, nv))
    for i in range(N):
        Aeq[np.arange(M), i * M + np.arange(M)] = 1.0
    G = np.zeros((N * M, nv))
    for i in range(N):
        rows = i * M + np.arange(M)
        G[rows, rows] = -1.0
        G[rows, p0 + i] = cs.coeff[i][:, 0] / scale
        G[rows, q0 + i] = cs.coeff[i][:, 1] / scale
    h = np.zeros(N * M)
    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    for i, spec in enumerate(specs):
        lower[p0 + i] = 0.0
        upper[p0 + i] = max(0.0, spec.p_upper)
        lower[q0 + i] = spec.q_lower
        upper[q0 + i] = spec.q_upper

    w = np.empty((N, M, T))
    ebar = np.empty((N, M, T))
    for t in range(T):
        ebar_t = cs.nu[t] / N
        c = np.zeros(nv)
        c[:N * M] = -2.0 * epsilon * np.tile(ebar_t / scale, N)
        c[p0:q0] = -1.0
        qp = QuadraticProgram(P, c, Aeq, cs.nu[t] / scale, G, h, lower, upper)
        sol = solve_qp(qp, cfg)
        if sol.status is not SolveStatus.OPTIMAL:
            raise AllocationFailure(
                f"envelope sizing at step {t}: solver status "
                f"{sol.status.value}")
        w[:, :, t] = sol.primal[:N * M].reshape(N, M) * scale
        ebar[:, :, t] = ebar_t
    return DoeAllocation(w=w, equality_index=ebar, epsilon=float(epsilon))


def _check_indices(alloc, i, t):
    if not 0 <= i < alloc.n_prosumers:
        raise IndexError(f"prosumer index {i} out of range")
    if not 0 <= t < alloc.horizon:
        raise IndexError(f"time step {t} out of range")


def doe_contains(alloc, cs, i, t, p_kw, q_kvar, tol=1e-9):
    """True iff (p, q) lies inside prosumer i's envelope at step t."""
    _check_indices(alloc, i, t)
    g = evaluate_g(cs, i, t, p_kw, q_kvar)
    return bool((g <= alloc.w[i, :, t] + tol).all())


def headroom(alloc, cs, i, t, p_kw, q_kvar):
    """Unused envelope w_i(t) - g_i(p, q); negative entries allowed."""
    _check_indices(alloc, i, t)
    return alloc.w[i, :, t] - evaluate_g(cs, i, t, p_kw, q_kvar)


def export_allocation_csv(alloc, cs, path):
    """Write the shares as rows (prosumer, t, row-label, w)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["prosumer", "t", "row", "w"])
        for i in range(alloc.n_prosumers):
            for t in range(alloc.horizon):
                for r, (node, kind) in enumerate(cs.labels):
                    out.writerow([i, t, f"{node}:{kind}",
                                  repr(float(alloc.w[i, r, t]))])
