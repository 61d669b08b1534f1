"""Three-commodity market clearing over a shared feeder.

The welfare problem stacks every prosumer's trajectory QP and couples
them only through per-step balance equalities: sum_i p_i(t) = 0,
sum_i q_i(t) = 0 and, rowwise, sum_i l_i(t) = 0.  Prices are the duals
of those rows.  Orientation: with the stacked problem written as a
minimization (utilities negated) and balance rows entering as +1
coefficients, each prosumer's best response at

    lam = -y_p,  gamma = -y_q,  beta = -y_l

reproduces its welfare allocation, because the balance column then
contributes exactly the -price term of the individual payoff gradient.
This is the competitive-equilibrium content of the welfare duals; the
Nash view adds a price player whose bilinear objective is finite only
when all aggregate trades vanish.

Reactive power and headroom trading are optional: a commodity that is
switched off is excluded from the decision vector entirely (not boxed
to zero), so disabled runs report exact zeros.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import row_scales
from .prosumer import (assemble_prosumer_blocks, check_feasible_point,
                       evaluate_payoff, unpack_decision, best_response,
                       SolverFailure)
from .solver import QuadraticProgram, SolveStatus, SolverConfig, solve_qp


class NonConvergence(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class MarketPrices:
    """Per-step clearing prices; all entries are per time step."""

    lam: np.ndarray    # (T,) active power
    gamma: np.ndarray  # (T,) reactive power
    beta: np.ndarray   # (M, T) envelope headroom, constraint-row units

    def __post_init__(self):
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.ndim != 2:
            raise ValueError("beta must be (M, T)")
        T = self.lam.shape[0]
        if self.gamma.shape != (T,) or self.beta.shape[1] != T:
            raise ValueError("price horizons disagree")
        for v in (self.lam, self.gamma, self.beta):
            if not np.isfinite(v).all():
                raise ValueError("prices must be finite")


@dataclass
class TradeDuals:
    psi: np.ndarray  # (T,) supply-cap multipliers
    pi: np.ndarray   # (M, T) envelope-headroom multipliers


@dataclass
class WelfareSolution:
    decisions: list
    prices: MarketPrices
    welfare: float
    balance_residuals: dict
    prosumer_duals: list
    include_q: bool
    include_l: bool

    @property
    def max_balance_residual(self):
        return max((float(np.abs(v).max()) if v.size else 0.0)
                   for v in self.balance_residuals.values())


@dataclass
class EquilibriumReport:
    payoff_gaps: np.ndarray
    payoffs: np.ndarray
    max_balance_residual: float
    price_player_value: float
    tolerance: float
    passed: bool
    unbounded_directions: list = field(default_factory=list)


def _balance_residuals(decisions, include_q, include_l):
    out = {"p": np.sum([d.P for d in decisions], axis=0)}
    if include_q:
        out["q"] = np.sum([d.Q for d in decisions], axis=0)
    if include_l:
        out["l"] = np.sum([d.L for d in decisions], axis=0)
    return out


def solve_welfare(prosumers, cs, alloc, cfg=None, include_q=True,
                  include_l=True):
    """Clear the market centrally; prices come from the balance duals."""
    cfg = cfg or SolverConfig()
    N = len(prosumers)
    if N == 0:
        raise ValueError("need at least one prosumer")
    T = prosumers[0].horizon
    if any(s.horizon != T for s in prosumers):
        raise ValueError("prosumer horizons disagree")
    M = cs.n_rows if cs is not None else 0
    include_l = include_l and M > 0
    if cs is not None:
        if alloc is None:
            raise ValueError("constraint set given without an allocation")
        if alloc.w.shape != (N, M, T):
            raise ValueError("allocation shape does not match scenario")
        if cs.n_prosumers != N:
            raise ValueError("constraint set covers a different prosumer set")
    for spec in prosumers:
        check_feasible_point(spec)

    blocks = [assemble_prosumer_blocks(
        spec, cs, alloc.w[i] if cs is not None else None, grid_index=i,
        include_q=include_q, include_l=include_l)
        for i, spec in enumerate(prosumers)]
    layouts = [b["layout"] for b in blocks]
    sizes = [lay["size"] for lay in layouts]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    nv = int(offs[-1])

    H = sp.block_diag([b["H"] for b in blocks], format="csr")
    f = np.concatenate([b["f"] for b in blocks])
    Ain = sp.block_diag([b["A_in"] for b in blocks], format="csr")
    bin_ = np.concatenate([b["b_in"] for b in blocks])
    lower = np.concatenate([b["lower"] for b in blocks])
    upper = np.concatenate([b["upper"] for b in blocks])

    # equality block: all dynamics first, then the balance families
    n_dyn = sum(b["A_eq"].shape[0] for b in blocks)
    n_bal = T + (T if include_q else 0) + (M * T if include_l else 0)
    bal = sp.lil_matrix((n_bal, nv))
    for i, lay in enumerate(layouts):
        o = offs[i]
        for t in range(T):
            bal[t, o + lay["p"].start + t] = 1.0
        if include_q:
            for t in range(T):
                bal[T + t, o + lay["q"].start + t] = 1.0
        if include_l:
            base = T + (T if include_q else 0)
            for k in range(M * T):
                bal[base + k, o + lay["l"].start + k] = 1.0
    Aeq = sp.vstack([sp.block_diag([b["A_eq"] for b in blocks],
                                   format="csr"), bal.tocsr()], format="csr")
    beq = np.concatenate([np.concatenate([b["b_eq"] for b in blocks]),
                          np.zeros(n_bal)])

    qp = QuadraticProgram(H, f, Aeq, beq, Ain, bin_, lower, upper)
    sol = solve_qp(qp, cfg)
    if sol.status is not SolveStatus.OPTIMAL:
        raise SolverFailure(f"welfare clearing: solver status "
                            f"{sol.status.value}")

    decisions = [unpack_decision(prosumers[i], cs,
                                 sol.primal[offs[i]:offs[i + 1]], layouts[i])
                 for i in range(N)]
    # the l columns and envelope rows are row-scaled inside the blocks;
    # divide the matching duals to price the raw row units
    rs = row_scales(cs) if M > 0 else np.ones(0)
    y_bal = sol.eq_duals[n_dyn:]
    lam = -y_bal[:T]
    gamma = -y_bal[T:2 * T] if include_q else np.zeros(T)
    if include_l:
        base = T + (T if include_q else 0)
        beta = -y_bal[base:].reshape(T, M).T / rs[:, None]
    else:
        beta = np.zeros((M, T))
    prices = MarketPrices(lam=lam, gamma=gamma, beta=beta)

    duals = []
    for i in range(N):
        rows = slice(int(np.sum([b["A_in"].shape[0] for b in blocks[:i]])),
                     int(np.sum([b["A_in"].shape[0] for b in blocks[:i + 1]])))
        zi = sol.ineq_duals[rows]
        psi = zi[:T]
        pi = (zi[T:].reshape(T, M).T / rs[:, None] if M > 0
              else np.zeros((M, T)))
        duals.append(TradeDuals(psi=psi.copy(), pi=pi))

    welfare = float(sum(evaluate_payoff(prosumers[i], decisions[i])
                        for i in range(N)))
    residuals = _balance_residuals(decisions, include_q, include_l)
    return WelfareSolution(decisions=decisions, prices=prices,
                           welfare=welfare, balance_residuals=residuals,
                           prosumer_duals=duals, include_q=include_q,
                           include_l=include_l)


def price_player_objective(prices, decisions):
    """Value of the adversarial price player at the given point.

    Bilinear in (prices, aggregate trades); zero whenever the market is
    balanced, unbounded over prices otherwise.
    """
    T = prices.lam.shape[0]
    for d in decisions:
        if d.P.shape != (T,) or d.Q.shape != (T,):
            raise ValueError("decision horizon does not match prices")
    P = np.sum([d.P for d in decisions], axis=0)
    Q = np.sum([d.Q for d in decisions], axis=0)
    val = -float(prices.lam @ P) - float(prices.gamma @ Q)
    L_shapes = {d.L.shape for d in decisions}
    if len(L_shapes) != 1:
        raise ValueError("headroom trade shapes disagree")
    L = np.sum([d.L for d in decisions], axis=0)
    if L.size:
        if L.shape != prices.beta.shape:
            raise ValueError("headroom rows do not match prices")
        val -= float(np.sum(prices.beta * L))
    return val


def _equilibrium_gaps(ws, prosumers, cs, alloc, cfg):
    gaps = np.zeros(len(prosumers))
    payoffs = np.zeros(len(prosumers))
    for i, spec in enumerate(prosumers):
        mine = evaluate_payoff(spec, ws.decisions[i], ws.prices)
        br = best_response(spec, ws.prices,
                           alloc.w[i] if cs is not None else None, cs,
                           grid_index=i, cfg=cfg, include_q=ws.include_q,
                           include_l=ws.include_l)
        gaps[i] = abs(evaluate_payoff(spec, br, ws.prices) - mine)
        payoffs[i] = mine
    return gaps, payoffs


def verify_competitive_equilibrium(ws, prosumers, cs, alloc, tol=1e-5,
                                   cfg=None):
    """Definition check: no prosumer can improve at the posted prices.

    Each prosumer's problem is re-solved independently; the payoff gap
    is price-invariant even when the optimizer itself is not unique.
    """
    cfg = cfg or SolverConfig()
    gaps, payoffs = _equilibrium_gaps(ws, prosumers, cs, alloc, cfg)
    resid = ws.max_balance_residual
    ok = bool((gaps <= tol * (1.0 + np.abs(payoffs))).all() and resid <= tol)
    return EquilibriumReport(
        payoff_gaps=gaps, payoffs=payoffs, max_balance_residual=resid,
        price_player_value=price_player_objective(ws.prices, ws.decisions),
        tolerance=tol, passed=ok)


def verify_nash(ws, prosumers, cs, alloc, tol=1e-5, cfg=None):
    """Game check: prosumer optimality plus price-player finiteness.

    The price player's objective is linear in prices with the aggregate
    trades as coefficients, so it admits a finite optimum only when
    every aggregate is zero; nonzero aggregates are reported as
    unbounded improvement directions.
    """
    cfg = cfg or SolverConfig()
    gaps, payoffs = _equilibrium_gaps(ws, prosumers, cs, alloc, cfg)
    directions = []
    for name, resid in ws.balance_residuals.items():
        flat = np.atleast_1d(resid)
        for idx in np.argwhere(np.abs(flat) > tol):
            directions.append((name, tuple(int(k) for k in idx)))
    resid = ws.max_balance_residual
    ok = bool((gaps <= tol * (1.0 + np.abs(payoffs))).all()
              and not directions)
    return EquilibriumReport(
        payoff_gaps=gaps, payoffs=payoffs, max_balance_residual=resid,
        price_player_value=price_player_objective(ws.prices, ws.decisions),
        tolerance=tol, passed=ok, unbounded_directions=directions)


def clear_decentralized(prosumers, cs, alloc, step_p, step_q=None,
                        step_l=None, max_iters=5000, residual_tol=1e-4,
                        cfg=None, include_q=True, include_l=True,
                        initial_prices=None):
    """Iterative dual-decomposition clearing.

    Subgradient ascent on the balance duals: each round every prosumer
    best-responds to the posted prices, then each price moves against
    its aggregate trade (unprojected; equality duals are sign-free).
    Returns (prices, decisions, trace); raises NonConvergence with the
    trace attached when the residuals fail to clear in max_iters.
    """
    if step_p <= 0 or (step_q is not None and step_q <= 0) \
            or (step_l is not None and step_l <= 0):
        raise ValueError("step sizes must be positive")
    step_q = step_p if step_q is None else step_q
    step_l = step_p if step_l is None else step_l
    cfg = cfg or SolverConfig()
    N = len(prosumers)
    T = prosumers[0].horizon
    M = cs.n_rows if cs is not None else 0
    include_l = include_l and M > 0
    if initial_prices is None:
        prices = MarketPrices(np.zeros(T), np.zeros(T), np.zeros((M, T)))
    else:
        prices = MarketPrices(initial_prices.lam.copy(),
                              initial_prices.gamma.copy(),
                              initial_prices.beta.copy())
    trace = []
    decisions = None
    for it in range(max_iters):
        decisions = [best_response(
            prosumers[i], prices, alloc.w[i] if cs is not None else None, cs,
            grid_index=i, cfg=cfg, include_q=include_q,
            include_l=include_l) for i in range(N)]
        resid = _balance_residuals(decisions, include_q, include_l)
        worst = max(float(np.abs(v).max()) for v in resid.values())
        trace.append({"iteration": it, "residual": worst,
                      "lam": prices.lam.copy(), "gamma": prices.gamma.copy(),
                      "beta": prices.beta.copy()})
        if worst <= residual_tol:
            return prices, decisions, trace
        lam = prices.lam - step_p * resid["p"]
        gamma = (prices.gamma - step_q * resid["q"] if include_q
                 else prices.gamma)
        beta = (prices.beta - step_l * resid["l"] if include_l
                else prices.beta)
        prices = MarketPrices(lam, gamma, beta)
    raise NonConvergence(
        f"decentralized clearing: residual {trace[-1]['residual']:.3g} "
        f"after {max_iters} iterations", trace)


@dataclass
class ScenarioComparison:
    welfare_with: float
    welfare_without: float
    delta: float
    delta_pct: float
    v_extremes_with: tuple | None
    v_extremes_without: tuple | None
    boundary_steps_with: int | None
    boundary_steps_without: int | None


def _voltage_sweep(ws, sens, band):
    from .grid import voltage_profile
    n_nodes = len(sens.nodes)
    T = ws.decisions[0].P.shape[0]
    vmin = np.full(n_nodes, np.inf)
    vmax = np.full(n_nodes, -np.inf)
    boundary = 0
    for t in range(T):
        p = np.array([d.P[t] for d in ws.decisions])
        q = np.array([d.Q[t] for d in ws.decisions])
        v = voltage_profile(sens, p, q)
        vmin = np.minimum(vmin, v)
        vmax = np.maximum(vmax, v)
        if band is not None and ((v <= band[0] + 1e-6).any()
                                 or (v >= band[1] - 1e-6).any()):
            boundary += 1
    return (vmin, vmax), boundary


def compare_scenarios(with_q, without_q, sens=None, band=None):
    """Welfare and voltage-band effect of reactive-power trading."""
    if len(with_q.decisions) != len(without_q.decisions):
        raise ValueError("scenarios have different prosumer counts")
    T1 = with_q.decisions[0].P.shape[0]
    T2 = without_q.decisions[0].P.shape[0]
    if T1 != T2:
        raise ValueError("scenarios have different horizons")
    delta = with_q.welfare - without_q.welfare
    ref = abs(without_q.welfare)
    pct = 100.0 * delta / ref if ref > 0 else float("inf") * np.sign(delta) \
        if delta else 0.0
    ext_w = ext_wo = None
    b_w = b_wo = None
    if sens is not None:
        ext_w, b_w = _voltage_sweep(with_q, sens, band)
        ext_wo, b_wo = _voltage_sweep(without_q, sens, band)
    return ScenarioComparison(
        welfare_with=with_q.welfare, welfare_without=without_q.welfare,
        delta=delta, delta_pct=pct, v_extremes_with=ext_w,
        v_extremes_without=ext_wo, boundary_steps_with=b_w,
        boundary_steps_without=b_wo)
