"""Market clearing, equilibrium verification and decentralized tests.

The hand-KKT oracles solve the two-prosumer single-step instances on
paper; the grid-search oracle sweeps (u1, u2) at step 1e-3; random
instances exercise the welfare-duals-are-equilibrium-prices property.
"""

import numpy as np
import pytest

from doemarket.doe import allocate_doe
from doemarket.grid import (FeederTopology, Line, assemble_constraints,
                            build_sensitivities)
from doemarket.market import (MarketPrices, NonConvergence,
                              clear_decentralized, compare_scenarios,
                              price_player_objective, solve_welfare,
                              verify_competitive_equilibrium, verify_nash)
from doemarket.prosumer import (ProsumerSpec, Utility, evaluate_payoff,
                                simulate_dynamics)
from doemarket.solver import SolverConfig


def quad_input_spec(a, u_box=100.0, p_box=100.0):
    """f = -u^2, one step, frozen state."""
    return ProsumerSpec(
        A=[[1.0]], B=[[0.0]], x0=[0.0], x_lower=[-1.0], x_upper=[1.0],
        u_lower=[-u_box], u_upper=[u_box], p_lower=-p_box, p_upper=p_box,
        q_lower=-10.0, q_upper=10.0, a=[float(a)], h_coeffs=[1.0],
        utility=Utility(Q_u=[[1.0]], Q_x=[[0.0]], x_target=[0.0],
                        Q_terminal=[[0.0]], terminal_target=[0.0]))


def tracking_spec(target, a, u_box=100.0, p_box=100.0):
    """f = -(u - target)^2 realized through x(1) = u."""
    return ProsumerSpec(
        A=[[0.0]], B=[[1.0]], x0=[0.0], x_lower=[-200.0], x_upper=[200.0],
        u_lower=[-u_box], u_upper=[u_box], p_lower=-p_box, p_upper=p_box,
        q_lower=-10.0, q_upper=10.0, a=[float(a)], h_coeffs=[1.0],
        utility=Utility(Q_u=[[0.0]], Q_x=[[0.0]], x_target=[0.0],
                        Q_terminal=[[1.0]], terminal_target=[float(target)]))


def battery_pair(T=2, pull=1.0):
    """Two batteries with opposing SoC targets to induce trade."""
    def mk(x0, target):
        return ProsumerSpec(
            A=np.eye(1), B=0.45 * np.eye(1), x0=[x0], x_lower=[0.0],
            x_upper=[30.0], u_lower=[-6.6], u_upper=[6.6],
            p_lower=-50.0, p_upper=50.0, q_lower=-5.0, q_upper=5.0,
            a=np.full(T, 20.0), h_coeffs=[1.0],
            utility=Utility(Q_u=[[0.05]], Q_x=[[0.0]], x_target=[0.0],
                            Q_terminal=[[pull]], terminal_target=[target]))
    return [mk(20.0, 5.0), mk(5.0, 20.0)]


def chain_setup(T=2, band=(0.97, 1.03)):
    topo = FeederTopology(
        nodes=["head", "a", "b"], head="head",
        lines=[Line("head", "a", 2.0, 4.0), Line("a", "b", 1.5, 3.0)],
        base_voltage_kv=4.16, base_power_kva=100.0,
        prosumer_nodes=["a", "b"])
    sens = build_sensitivities(topo)
    cs = assemble_constraints(sens, band[0], band[1], T)
    return sens, cs


def test_hand_kkt_reference_instance():
    # [DERIVED] f1 = -u1^2, f2 = -(u2 - 1)^2, a = (1, 0):
    # balance forces u1 + u2 = 1 at the caps, optimum u = (0, 1),
    # p = (1, -1), lam* = 0, welfare 0
    # the cap dual vanishes at the optimum, so the dual error scales like
    # sqrt of the complementarity gap; solve tight to pin lam
    specs = [quad_input_spec(1.0), tracking_spec(1.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False,
                       cfg=SolverConfig(kkt_tolerance=1e-12))
    assert ws.prices.lam[0] == pytest.approx(0.0, abs=5e-6)
    assert ws.decisions[0].P[0] == pytest.approx(1.0, abs=1e-6)
    assert ws.decisions[1].P[0] == pytest.approx(-1.0, abs=1e-6)
    assert ws.decisions[0].U[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert ws.decisions[1].U[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert ws.welfare == pytest.approx(0.0, abs=1e-6)

    # grid-search oracle over (u1, u2): caps give p1 <= 1 - u1, p2 <= -u2,
    # and balance is satisfiable iff u1 + u2 <= 1
    grid = np.arange(-2.0, 2.0 + 1e-9, 1e-3)
    best = -np.inf
    for u1 in grid:
        feas = grid <= 1.0 - u1
        if feas.any():
            v = -(u1 ** 2) - (grid[feas] - 1.0) ** 2
            best = max(best, float(v.max()))
    assert ws.welfare == pytest.approx(best, abs=1e-4)


def test_lambda_matches_hand_dual():
    # [DERIVED] f2 target 3, a = (1, 0): lam* = 3 - 1 = 2, psi = lam
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False)
    assert ws.prices.lam[0] == pytest.approx(2.0, abs=1e-6)
    assert ws.decisions[0].U[0, 0] == pytest.approx(-1.0, abs=1e-6)
    assert ws.decisions[1].U[0, 0] == pytest.approx(2.0, abs=1e-6)
    for d in ws.prosumer_duals:
        assert d.psi[0] == pytest.approx(2.0, abs=1e-6)
    rep = verify_competitive_equilibrium(ws, specs, None, None, tol=1e-5)
    assert rep.passed
    assert rep.max_balance_residual <= 1e-6


def test_single_prosumer_market_is_autarky():
    # [TRIVIAL] balance pins every trade of a lone participant to zero
    spec = quad_input_spec(5.0)
    ws = solve_welfare([spec], None, None, include_q=False, include_l=False)
    assert np.abs(ws.decisions[0].P).max() <= 1e-8
    assert (ws.decisions[0].Q == 0.0).all()       # excluded, byte zero
    assert ws.welfare == pytest.approx(0.0, abs=1e-8)  # u* = 0
    assert verify_competitive_equilibrium(ws, [spec], None, None).passed
    assert verify_nash(ws, [spec], None, None).passed


def test_mirrored_supply_forces_transfer():
    # [TRIVIAL] a = (2, -2), p boxes [-3, 2], h = 0: supply caps leave
    # p2 in [-3, -2], balance leaves p1 = -p2 in {2}
    def mk(a):
        return ProsumerSpec(
            A=[[1.0]], B=[[0.0]], x0=[0.0], x_lower=[-1.0], x_upper=[1.0],
            u_lower=[-1.0], u_upper=[1.0], p_lower=-3.0, p_upper=2.0,
            q_lower=-1.0, q_upper=1.0, a=[float(a)], h_coeffs=[0.0],
            utility=Utility(Q_u=[[1.0]], Q_x=[[0.0]], x_target=[0.0],
                            Q_terminal=[[0.0]], terminal_target=[0.0]))
    ws = solve_welfare([mk(2.0), mk(-2.0)], None, None,
                       include_q=False, include_l=False)
    assert ws.decisions[0].P[0] == pytest.approx(2.0, abs=1e-7)
    assert ws.decisions[1].P[0] == pytest.approx(-2.0, abs=1e-7)


def random_grid_instance(rng, N, T, n_chain, band_width):
    """Radial chain feeder with N prosumers on distinct random nodes."""
    assert N <= n_chain
    nodes = ["head"] + [f"n{k}" for k in range(n_chain)]
    lines = [Line(nodes[k], nodes[k + 1], 0.5 + rng.uniform(0, 2),
                  1.0 + rng.uniform(0, 3)) for k in range(n_chain)]
    pnodes = [str(s) for s in rng.choice(nodes[1:], size=N, replace=False)]
    topo = FeederTopology(nodes=nodes, head="head", lines=lines,
                          base_voltage_kv=4.16, base_power_kva=100.0,
                          prosumer_nodes=pnodes)
    sens = build_sensitivities(topo)
    cs = assemble_constraints(sens, 1.0 - band_width, 1.0 + band_width, T)
    specs = []
    for i in range(cs.n_prosumers):
        x0 = rng.uniform(5, 15)
        specs.append(ProsumerSpec(
            A=np.eye(1), B=0.45 * np.eye(1), x0=[x0], x_lower=[0.0],
            x_upper=[30.0], u_lower=[-6.6], u_upper=[6.6],
            p_lower=-40.0, p_upper=40.0, q_lower=-8.0, q_upper=8.0,
            a=rng.uniform(1.0, 10.0, T), h_coeffs=[1.0],
            utility=Utility(Q_u=[[rng.uniform(0.02, 0.3)]], Q_x=[[0.0]],
                            x_target=[0.0],
                            Q_terminal=[[rng.uniform(0.1, 1.0)]],
                            terminal_target=[rng.uniform(0, 30)])))
    return cs, specs


def test_welfare_duals_clear_random_instances():
    # the central property: balance duals support every prosumer's
    # welfare allocation as its own best response
    rng = np.random.default_rng(20240814)
    cases = [(2, 1, 2, 0.05), (3, 2, 3, 0.03), (5, 3, 5, 0.002),
             (4, 8, 4, 0.01), (6, 2, 6, 0.001)]
    for N, T, n_chain, bw in cases:
        cs, specs = random_grid_instance(rng, N, T, n_chain, bw)
        alloc = allocate_doe(cs, specs)
        ws = solve_welfare(specs, cs, alloc)
        rep = verify_competitive_equilibrium(ws, specs, cs, alloc, tol=1e-5)
        assert rep.passed, (N, T, n_chain, bw, rep.payoff_gaps,
                            rep.max_balance_residual)
        nash = verify_nash(ws, specs, cs, alloc, tol=1e-5)
        assert nash.passed and not nash.unbounded_directions


def test_complementary_slackness_and_slack_beta():
    # [DERIVED] downstream prosumer is forced to import (a < 0) while the
    # far node's lower voltage row leaves too little headroom: the row
    # must bind, the importer discharges against its charging target, and
    # the row price turns positive; slack rows stay free
    sens, cs = chain_setup(T=2, band=(0.999, 1.001))

    def mk(a, x0, target, pull):
        return ProsumerSpec(
            A=np.eye(1), B=0.45 * np.eye(1), x0=[x0], x_lower=[0.0],
            x_upper=[30.0], u_lower=[-6.6], u_upper=[6.6],
            p_lower=-40.0, p_upper=40.0, q_lower=-3.0, q_upper=3.0,
            a=np.full(2, a), h_coeffs=[1.0],
            utility=Utility(Q_u=[[0.02]], Q_x=[[0.0]], x_target=[0.0],
                            Q_terminal=[[pull]], terminal_target=[target]))

    specs = [mk(20.0, 15.0, 15.0, 0.5),    # exporter at a
             mk(-20.0, 5.0, 25.0, 5.0)]    # importer at b
    alloc = allocate_doe(cs, specs)
    ws = solve_welfare(specs, cs, alloc)
    assert ws.max_balance_residual <= 1e-8
    # the importer gives up charging: u < 0 despite target 25 > x0
    assert ws.decisions[1].U.max() < -0.1

    from doemarket.grid import evaluate_g
    any_tight = False
    for i, spec in enumerate(specs):
        d = ws.decisions[i]
        pi = ws.prosumer_duals[i].pi
        for t in range(spec.horizon):
            slack = (alloc.w[i, :, t]
                     - evaluate_g(cs, i, t, d.P[t], d.Q[t]) - d.L[:, t])
            any_tight = any_tight or (slack < 1e-5).any()
            assert (np.abs(pi[:, t] * slack) <= 1e-5).all()
            # every prosumer sees the same row prices
            assert (np.abs(pi[:, t] - ws.prices.beta[:, t])
                    <= 1e-5 * (1.0 + np.abs(ws.prices.beta[:, t]))).all()
    assert any_tight
    # the constrained lower row at b carries a positive price ...
    assert ws.prices.beta[3].min() > 1.0
    # ... and rows slack for every prosumer carry ~zero price
    for t in range(2):
        for r in range(cs.n_rows):
            slacks = [alloc.w[i, r, t]
                      - float(evaluate_g(cs, i, t, ws.decisions[i].P[t],
                                         ws.decisions[i].Q[t])[r])
                      - ws.decisions[i].L[r, t] for i in range(len(specs))]
            if min(slacks) > 1e-4:
                assert abs(ws.prices.beta[r, t]) <= 1e-6


def test_perturbed_prices_break_equilibrium():
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False)
    ws.prices.lam[0] += 10.0
    rep = verify_competitive_equilibrium(ws, specs, None, None, tol=1e-5)
    assert not rep.passed
    assert rep.payoff_gaps.max() > 1.0


def test_price_player_objective_values():
    # [TRIVIAL] balanced aggregates zero out any price vector
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False)
    assert abs(price_player_objective(ws.prices, ws.decisions)) <= 1e-6
    wild = MarketPrices(np.array([123.0]), np.array([-7.0]),
                        np.zeros((0, 1)))
    balanced = ws.decisions
    assert price_player_objective(wild, balanced) == pytest.approx(
        0.0, abs=1e-4)
    # unbalanced: sum p(t0) = 1 at lam(t0) = 5 -> -5
    d0 = ws.decisions[0]
    doctored = [d0.__class__(U=d0.U, X=d0.X, P=d0.P + 1.0, Q=d0.Q, L=d0.L),
                ws.decisions[1]]
    five = MarketPrices(np.array([5.0]), np.zeros(1), np.zeros((0, 1)))
    assert price_player_objective(five, doctored) == pytest.approx(
        -5.0, abs=1e-6)


def test_nash_unbounded_direction_reported():
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False)
    ws.decisions[0].P[0] += 0.1
    ws.balance_residuals["p"] = ws.balance_residuals["p"] + 0.1
    rep = verify_nash(ws, specs, None, None, tol=1e-5)
    assert not rep.passed
    assert ("p", (0,)) in rep.unbounded_directions


def test_decentralized_fixed_point():
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False)
    prices, decisions, trace = clear_decentralized(
        specs, None, None, step_p=0.5, max_iters=5,
        residual_tol=1e-4, include_q=False, include_l=False,
        initial_prices=ws.prices)
    assert len(trace) <= 2
    assert trace[-1]["residual"] <= 1e-4
    assert prices.lam[0] == pytest.approx(ws.prices.lam[0], abs=1e-6)


def test_decentralized_matches_central_dual():
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    ws = solve_welfare(specs, None, None, include_q=False, include_l=False)
    prices, decisions, trace = clear_decentralized(
        specs, None, None, step_p=0.5, max_iters=5000,
        residual_tol=1e-4, include_q=False, include_l=False)
    assert len(trace) <= 5000
    assert abs(prices.lam[0] - ws.prices.lam[0]) <= 1e-3
    agg = sum(d.P[0] for d in decisions)
    assert abs(agg) <= 1e-4


def test_decentralized_divergence_reports_trace():
    specs = [quad_input_spec(1.0), tracking_spec(3.0, 0.0)]
    with pytest.raises(NonConvergence) as exc:
        clear_decentralized(specs, None, None, step_p=1e6, max_iters=50,
                            residual_tol=1e-4, include_q=False,
                            include_l=False)
    trace = exc.value.trace
    assert len(trace) == 50
    # oscillating between the trade boxes, not settling
    assert trace[-1]["residual"] > 1.0
    assert max(rec["residual"] for rec in trace) > 10.0


def test_step_size_validation():
    specs = [quad_input_spec(1.0)]
    with pytest.raises(ValueError, match="step"):
        clear_decentralized(specs, None, None, step_p=0.0,
                            include_q=False, include_l=False)


def test_compare_scenarios_basics():
    sens, cs = chain_setup(T=2, band=(0.9995, 1.0005))
    specs = battery_pair(T=2)
    alloc = allocate_doe(cs, specs)
    with_q = solve_welfare(specs, cs, alloc, include_q=True, include_l=True)
    no_q = solve_welfare(specs, cs, alloc, include_q=False, include_l=True)
    cmpr = compare_scenarios(with_q, no_q, sens=sens, band=(0.9995, 1.0005))
    assert cmpr.delta >= -1e-7  # q == 0 feasible in the richer problem
    same = compare_scenarios(no_q, no_q)
    assert same.delta == 0.0 and same.delta_pct == 0.0
    assert cmpr.v_extremes_with is not None
    vmin, vmax = cmpr.v_extremes_with
    assert np.isfinite(vmin).all() and (vmax >= vmin).all()
    bad = solve_welfare(specs[:1], None, None, include_q=False,
                        include_l=False)
    with pytest.raises(ValueError, match="prosumer counts"):
        compare_scenarios(with_q, bad)


def test_welfare_monotone_in_headroom_trading():
    sens, cs = chain_setup(T=2, band=(0.999, 1.001))
    specs = battery_pair(T=2)
    alloc = allocate_doe(cs, specs)
    with_l = solve_welfare(specs, cs, alloc, include_q=True, include_l=True)
    no_l = solve_welfare(specs, cs, alloc, include_q=True, include_l=False)
    assert with_l.welfare >= no_l.welfare - 1e-7
    assert (no_l.decisions[0].L == 0.0).all()
