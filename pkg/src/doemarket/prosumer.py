"""Prosumer model: linear dynamics, quadratic utilities, best response.

A prosumer's decision over the horizon is (U, X, P, Q, L): inputs,
states, active/reactive injections and envelope-headroom trades.  The
per-step utility is concave quadratic,

    f(x(t), u(t)) = -u(t)'Q_u u(t) - (x(t) - xt)'Q_x[t] (x(t) - xt),

with a terminal term of the same form, and the payoff adds the trading
income lambda*p + gamma*q + beta.l at the posted prices.  The best
response maximizes that payoff subject to dynamics (kept as explicit
equality rows), the supply cap p <= a - h'u, the envelope-headroom cap
l <= w - g(p, q), and all box bounds.

Variable layout used for the QP (shared with the market stacker):
[u(0..T-1) | x(1..T) | p(0..T-1) | q(0..T-1) | l(0..T-1)], q and l
blocks present only when their commodity is traded.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import row_scales
from .solver import QuadraticProgram, SolveStatus, SolverConfig, solve_qp


class InfeasibleProsumer(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


def _psd_check(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.abs(M - M.T).max() > 1e-12 * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -1e-10 * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass
class Utility:
    """Concave quadratic utility data (stored as PSD penalty matrices)."""

    Q_u: np.ndarray            # m x m
    Q_x: np.ndarray            # (T, n, n) or (n, n)
    x_target: np.ndarray       # (T, n) or (n,)
    Q_terminal: np.ndarray     # n x n
    terminal_target: np.ndarray  # (n,)


class ProsumerSpec:
    """Immutable prosumer data; validates shapes, bounds and concavity."""

    def __init__(self, A, B, x0, x_lower, x_upper, u_lower, u_upper,
                 p_lower, p_upper, q_lower, q_upper, a, h_coeffs, utility,
                 name=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        self.n_states = self.A.shape[0]
        if self.B.shape[0] != self.n_states:
            raise ValueError("B row count must match state dimension")
        self.n_inputs = self.B.shape[1]
        self.a = np.asarray(a, dtype=float).ravel()
        self.horizon = self.a.shape[0]
        if self.horizon < 1:
            raise ValueError("net-supply profile must cover at least one step")

        self.x0 = np.asarray(x0, dtype=float).ravel()
        self.x_lower = np.asarray(x_lower, dtype=float).ravel()
        self.x_upper = np.asarray(x_upper, dtype=float).ravel()
        for v, nm in ((self.x0, "x0"), (self.x_lower, "x_lower"),
                      (self.x_upper, "x_upper")):
            if v.shape != (self.n_states,):
                raise ValueError(f"{nm} must have one entry per state")
        if np.any(self.x_lower > self.x_upper):
            raise ValueError("x_lower exceeds x_upper")
        if np.any(self.x0 < self.x_lower - 1e-12) or np.any(self.x0 > self.x_upper + 1e-12):
            raise ValueError("x0 outside state bounds")

        self.u_lower = self._per_step_bounds(u_lower, "u_lower")
        self.u_upper = self._per_step_bounds(u_upper, "u_upper")
        if np.any(self.u_lower > self.u_upper):
            raise ValueError("u_lower exceeds u_upper")
        self.p_lower = float(p_lower)
        self.p_upper = float(p_upper)
        self.q_lower = float(q_lower)
        self.q_upper = float(q_upper)
        if self.p_lower > self.p_upper or self.q_lower > self.q_upper:
            raise ValueError("power bounds inverted")

        self.h_coeffs = np.asarray(h_coeffs, dtype=float).ravel()
        if self.h_coeffs.shape != (self.n_inputs,):
            raise ValueError("h_coeffs must have one entry per input channel")

        Qx = np.asarray(utility.Q_x, dtype=float)
        if Qx.ndim == 2:
            Qx = np.tile(Qx, (self.horizon, 1, 1))
        if Qx.shape != (self.horizon, self.n_states, self.n_states):
            raise ValueError("Q_x must be (T, n, n) or (n, n)")
        xt = np.asarray(utility.x_target, dtype=float)
        if xt.ndim == 1:
            xt = np.tile(xt, (self.horizon, 1))
        if xt.shape != (self.horizon, self.n_states):
            raise ValueError("x_target must be (T, n) or (n,)")
        self.utility = Utility(
            Q_u=_psd_check(utility.Q_u, "Q_u"),
            Q_x=np.stack([_psd_check(Qx[t], f"Q_x[{t}]") for t in range(self.horizon)]),
            x_target=xt,
            Q_terminal=_psd_check(utility.Q_terminal, "Q_terminal"),
            terminal_target=np.asarray(utility.terminal_target, dtype=float).ravel())
        if self.utility.Q_u.shape != (self.n_inputs, self.n_inputs):
            raise ValueError("Q_u must be m x m")
        if self.utility.terminal_target.shape != (self.n_states,):
            raise ValueError("terminal_target must have one entry per state")
        self.name = name or "prosumer"

    def _per_step_bounds(self, v, nm):
        v = np.asarray(v, dtype=float)
        if v.ndim == 0:
            v = np.full(self.n_inputs, float(v))
        if v.ndim == 1:
            if v.shape != (self.n_inputs,):
                raise ValueError(f"{nm} must have one entry per input channel")
            return np.tile(v, (self.horizon, 1))
        if v.shape != (self.horizon, self.n_inputs):
            raise ValueError(f"{nm} must be (m,) or (T, m)")
        return v.copy()


@dataclass
class TrajectoryDecision:
    U: np.ndarray   # (m, T) kW
    X: np.ndarray   # (n, T+1) kWh
    P: np.ndarray   # (T,) kW
    Q: np.ndarray   # (T,) kVar
    L: np.ndarray   # (M, T) constraint-row units


def simulate_dynamics(spec, U):
    """Roll x(t+1) = A x(t) + B u(t) from x0; no bound checking."""
    U = np.asarray(U, dtype=float)
    if U.shape != (spec.n_inputs, spec.horizon):
        raise ValueError(f"U must be (m, T) = ({spec.n_inputs}, {spec.horizon})")
    X = np.empty((spec.n_states, spec.horizon + 1))
    X[:, 0] = spec.x0
    for t in range(spec.horizon):
        X[:, t + 1] = spec.A @ X[:, t] + spec.B @ U[:, t]
    return X


def evaluate_payoff(spec, decision, prices=None):
    """Utility plus trading income at the given prices, in cents."""
    T = spec.horizon
    ut = spec.utility
    total = 0.0
    for t in range(T):
        du = decision.U[:, t]
        dx = decision.X[:, t] - ut.x_target[t]
        total -= du @ ut.Q_u @ du
        total -= dx @ ut.Q_x[t] @ dx
    dT = decision.X[:, T] - ut.terminal_target
    total -= dT @ ut.Q_terminal @ dT
    if prices is not None:
        total += float(prices.lam @ decision.P)
        total += float(prices.gamma @ decision.Q)
        if decision.L.size:
            total += float(np.sum(prices.beta * decision.L))
    return float(total)


def decision_layout(spec, n_rows, include_q=True, include_l=True):
    """Index slices of the stacked per-prosumer decision vector."""
    m, n, T = spec.n_inputs, spec.n_states, spec.horizon
    M = n_rows if include_l else 0
    pos = 0
    out = {}
    out["u"] = slice(pos, pos + m * T); pos += m * T
    out["x"] = slice(pos, pos + n * T); pos += n * T
    out["p"] = slice(pos, pos + T); pos += T
    if include_q:
        out["q"] = slice(pos, pos + T); pos += T
    if include_l and M:
        out["l"] = slice(pos, pos + M * T); pos += M * T
    out["size"] = pos
    return out


def assemble_prosumer_blocks(spec, cs, w, grid_index=0, include_q=True,
                             include_l=True, l_cap=None):
    """Sparse QP blocks for one prosumer (minimization form, no price terms).

    grid_index selects the prosumer's coefficient block in cs; w is its
    envelope share, shape (M, T).  cs may be None (no grid rows).  With
    cs present the envelope rows l + g(p, q) <= w are always emitted;
    when headroom trading is off the l column is simply absent (l == 0).
    The traded l is boxed at +-l_cap, a synthetic cap wide enough to
    never bind at an optimum (it only rules out drift along zero-price
    directions inside the solver).

    The envelope rows are emitted divided by the per-row scale from
    ``grid.row_scales`` (returned under "row_scale"), so the l columns
    hold l / scale: prices injected on them must be multiplied by the
    scale, and ``unpack_decision`` maps the solution back to raw units.
    """
    m, n, T = spec.n_inputs, spec.n_states, spec.horizon
    M = cs.n_rows if cs is not None else 0
    lay = decision_layout(spec, M, include_q, include_l and M > 0)
    nv = lay["size"]
    has_l = "l" in lay
    has_q = "q" in lay
    has_rows = M > 0

    # objective: utility terms negated; x(0) term is constant and dropped
    H = sp.lil_matrix((nv, nv))
    f = np.zeros(nv)
    ut = spec.utility
    for t in range(T):
        su = lay["u"].start + t * m
        H[su:su + m, su:su + m] = 2.0 * ut.Q_u
    for t in range(1, T):
        sx = lay["x"].start + (t - 1) * n
        H[sx:sx + n, sx:sx + n] = 2.0 * ut.Q_x[t]
        f[sx:sx + n] = -2.0 * ut.Q_x[t] @ ut.x_target[t]
    sx = lay["x"].start + (T - 1) * n
    H[sx:sx + n, sx:sx + n] = (H[sx:sx + n, sx:sx + n].toarray()
                               + 2.0 * ut.Q_terminal)
    f[sx:sx + n] += -2.0 * ut.Q_terminal @ ut.terminal_target

    # dynamics x(t+1) - A x(t) - B u(t) = 0 as equality rows
    Aeq = sp.lil_matrix((n * T, nv))
    beq = np.zeros(n * T)
    for t in range(T):
        r = t * n
        sx1 = lay["x"].start + t * n
        Aeq[r:r + n, sx1:sx1 + n] = np.eye(n)
        su = lay["u"].start + t * m
        Aeq[r:r + n, su:su + m] = -spec.B
        if t == 0:
            beq[r:r + n] = spec.A @ spec.x0
        else:
            sx0 = lay["x"].start + (t - 1) * n
            Aeq[r:r + n, sx0:sx0 + n] = -spec.A

    # supply cap p(t) + h'u(t) <= a(t), then envelope rows
    n_in = T + (M * T if has_rows else 0)
    Ain = sp.lil_matrix((n_in, nv))
    bin_ = np.zeros(n_in)
    for t in range(T):
        Ain[t, lay["p"].start + t] = 1.0
        su = lay["u"].start + t * m
        Ain[t, su:su + m] = spec.h_coeffs
        bin_[t] = spec.a[t]
    rs = row_scales(cs) if has_rows else np.ones(0)
    if has_rows:
        gcoef = cs.coeff[grid_index] / rs[:, None]    # (M, 2), O(1) entries
        w = np.asarray(w, dtype=float)
        if w.shape != (M, T):
            raise ValueError(f"w must be (M, T) = ({M}, {T})")
        for t in range(T):
            r0 = T + t * M
            for r in range(M):
                if has_l:
                    Ain[r0 + r, lay["l"].start + t * M + r] = 1.0
                Ain[r0 + r, lay["p"].start + t] = gcoef[r, 0]
                if has_q:
                    Ain[r0 + r, lay["q"].start + t] = gcoef[r, 1]
            bin_[r0:r0 + M] = w[:, t] / rs

    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    for t in range(T):
        su = lay["u"].start + t * m
        lower[su:su + m] = spec.u_lower[t]
        upper[su:su + m] = spec.u_upper[t]
        sxt = lay["x"].start + t * n
        lower[sxt:sxt + n] = spec.x_lower
        upper[sxt:sxt + n] = spec.x_upper
    lower[lay["p"]] = spec.p_lower
    upper[lay["p"]] = spec.p_upper
    if has_q:
        lower[lay["q"]] = spec.q_lower
        upper[lay["q"]] = spec.q_upper
    if has_l:
        if l_cap is None:
            mag = max(np.abs(cs.nu / rs).max(initial=0.0),
                      np.abs(w / rs[:, None]).max(initial=0.0))
            cap = np.full(M, 10.0 * (1.0 + mag))
        else:
            cap = float(l_cap) / rs
        lower[lay["l"]] = np.tile(-cap, T)
        upper[lay["l"]] = np.tile(cap, T)

    return {"H": H.tocsr(), "f": f, "A_eq": Aeq.tocsr(), "b_eq": beq,
            "A_in": Ain.tocsr(), "b_in": bin_, "lower": lower,
            "upper": upper, "layout": lay, "row_scale": rs}


def unpack_decision(spec, cs, x_vec, layout):
    """TrajectoryDecision from a solved decision vector; X re-simulated."""
    m, T = spec.n_inputs, spec.horizon
    M = cs.n_rows if cs is not None else 0
    U = np.asarray(x_vec[layout["u"]]).reshape(T, m).T
    P = np.asarray(x_vec[layout["p"]]).copy()
    Q = (np.asarray(x_vec[layout["q"]]).copy() if "q" in layout
         else np.zeros(T))
    if "l" in layout:
        # l columns are stored scaled; map back to raw row units
        L = (np.asarray(x_vec[layout["l"]]).reshape(T, M).T
             * row_scales(cs)[:, None])
    else:
        L = np.zeros((M, T))
    return TrajectoryDecision(U=U, X=simulate_dynamics(spec, U), P=P, Q=Q, L=L)


def check_feasible_point(spec, tol=1e-6):
    """Reject specs with no interior trading point (u clipped to 0).

    The candidate is u(t) = clip(0), x from the dynamics, p at the top
    of its window; a margin of `tol` is required on the supply cap so
    strict feasibility holds for the inequality system.
    """
    T = spec.horizon
    u = np.clip(np.zeros((T, spec.n_inputs)), spec.u_lower, spec.u_upper)
    X = simulate_dynamics(spec, u.T)
    if (X.T < spec.x_lower - tol).any() or (X.T > spec.x_upper + tol).any():
        raise InfeasibleProsumer(
            f"{spec.name}: zero-input state trajectory leaves state bounds")
    for t in range(T):
        top = min(spec.p_upper, spec.a[t] - spec.h_coeffs @ u[t])
        if top < spec.p_lower + tol:
            raise InfeasibleProsumer(
                f"{spec.name}: empty active-power window at step {t} "
                f"(supply cap {top:.6g} vs p_lower {spec.p_lower:.6g})")


def best_response(spec, prices, w, cs, grid_index=0, cfg=None,
                  include_q=True, include_l=True):
    """Payoff-maximizing trajectory at posted prices within the envelope."""
    cfg = cfg or SolverConfig()
    check_feasible_point(spec)
    blocks = assemble_prosumer_blocks(spec, cs, w, grid_index=grid_index,
                                      include_q=include_q,
                                      include_l=include_l)
    lay = blocks["layout"]
    f = blocks["f"].copy()
    T = spec.horizon
    f[lay["p"]] -= np.asarray(prices.lam, dtype=float)
    if "q" in lay:
        f[lay["q"]] -= np.asarray(prices.gamma, dtype=float)
    if "l" in lay:
        M = cs.n_rows
        scaled = (np.asarray(prices.beta, dtype=float)
                  * blocks["row_scale"][:, None])
        f[lay["l"]] -= scaled.T.reshape(M * T)
    qp = QuadraticProgram(blocks["H"], f, blocks["A_eq"], blocks["b_eq"],
                          blocks["A_in"], blocks["b_in"],
                          blocks["lower"], blocks["upper"])
    sol = solve_qp(qp, cfg)
    if sol.status is not SolveStatus.OPTIMAL:
        raise SolverFailure(
            f"best response for {spec.name}: solver status {sol.status.value}")
    return unpack_decision(spec, cs, sol.primal, lay)
