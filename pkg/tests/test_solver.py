"""QP solver contract: primal/dual accuracy, statuses, determinism."""

import copy

import numpy as np
import pytest

from doemarket import (QuadraticProgram, SolveStatus, SolverConfig,
                       check_kkt, solve_qp)

from oracles import enumerate_qp, make_solver_corpus


def seed42_problem():
    rng = np.random.default_rng(42)
    n = 6
    M = rng.normal(size=(n, n))
    P = M @ M.T + np.eye(n)
    c = rng.normal(size=n)
    x0 = rng.normal(size=n)
    Aeq = rng.normal(size=(2, n))
    Ain = rng.normal(size=(3, n))
    args = dict(objective_matrix=P, objective_vector=c,
                eq_matrix=Aeq, eq_rhs=Aeq @ x0,
                ineq_matrix=Ain, ineq_rhs=Ain @ x0 + np.array([0.0, 0.5, 2.0]),
                lower=np.full(n, -3.0), upper=np.full(n, 3.0))
    return args


def test_equality_example():
    # min 1/2 x^2 s.t. x = 1: stationarity x + mu = 0 at x = 1
    qp = QuadraticProgram([[1.0]], [0.0], eq_matrix=[[1.0]], eq_rhs=[1.0])
    sol = solve_qp(qp)
    assert sol.status is SolveStatus.OPTIMAL
    assert abs(sol.primal[0] - 1.0) < 1e-8
    assert abs(sol.eq_duals[0] - (-1.0)) < 1e-8


def test_inequality_example():
    # min x^2 s.t. -x <= -1: 2x - pi = 0 at x = 1
    qp = QuadraticProgram([[2.0]], [0.0], ineq_matrix=[[-1.0]], ineq_rhs=[-1.0])
    sol = solve_qp(qp)
    assert sol.status is SolveStatus.OPTIMAL
    assert abs(sol.primal[0] - 1.0) < 1e-8
    assert abs(sol.ineq_duals[0] - 2.0) < 1e-8


def test_seed42_matches_enumeration_oracle():
    args = seed42_problem()
    oracle = enumerate_qp(args["objective_matrix"], args["objective_vector"],
                          args["eq_matrix"], args["eq_rhs"],
                          args["ineq_matrix"], args["ineq_rhs"],
                          args["lower"], args["upper"])
    assert oracle is not None
    sol = solve_qp(QuadraticProgram(**args))
    assert sol.status is SolveStatus.OPTIMAL
    assert np.abs(sol.primal - oracle["x"]).max() < 1e-7
    assert np.abs(sol.eq_duals - oracle["eq_duals"]).max() < 1e-7
    mi = 3
    assert np.abs(sol.ineq_duals - oracle["row_duals"][:mi]).max() < 1e-7


def test_check_kkt_accepts_oracle_solution():
    args = seed42_problem()
    qp = QuadraticProgram(**args)
    oracle = enumerate_qp(args["objective_matrix"], args["objective_vector"],
                          args["eq_matrix"], args["eq_rhs"],
                          args["ineq_matrix"], args["ineq_rhs"],
                          args["lower"], args["upper"])
    mi = 3
    n = qp.n
    zl = np.zeros(n)
    zu = np.zeros(n)
    zl[oracle["lower_rows"]] = oracle["row_duals"][mi:mi + n]
    zu[oracle["upper_rows"]] = oracle["row_duals"][mi + n:]
    cand = solve_qp(qp)
    cand = copy.deepcopy(cand)
    cand.primal = oracle["x"]
    cand.eq_duals = oracle["eq_duals"]
    cand.ineq_duals = oracle["row_duals"][:mi]
    cand.lower_duals = zl
    cand.upper_duals = zu
    assert check_kkt(qp, cand, 1e-7).passed


def test_check_kkt_self_consistency_and_perturbation():
    qp = QuadraticProgram(**seed42_problem())
    sol = solve_qp(qp)
    assert check_kkt(qp, sol, 1e-8).passed
    bad = copy.deepcopy(sol)
    bad.primal = bad.primal.copy()
    bad.primal[0] += 1.0
    rep = check_kkt(qp, bad, 1e-8)
    assert not rep.passed
    assert rep.residuals.stationarity > 0.5


def test_corpus_matches_oracle():
    corpus = make_solver_corpus(count=100)
    for k, args in enumerate(corpus):
        qp = QuadraticProgram(**args)
        sol = solve_qp(qp)
        assert sol.status is SolveStatus.OPTIMAL, (k, sol.kkt_residuals)
        assert check_kkt(qp, sol, 1e-8).passed, k
        oracle = enumerate_qp(args["objective_matrix"], args["objective_vector"],
                              args.get("eq_matrix"), args.get("eq_rhs"),
                              args.get("ineq_matrix"), args.get("ineq_rhs"),
                              args.get("lower"), args.get("upper"))
        assert oracle is not None, k
        rel = abs(sol.objective - oracle["objective"]) / (1 + abs(oracle["objective"]))
        assert rel < 1e-7, (k, rel)
        assert np.abs(sol.primal - oracle["x"]).max() < 1e-6, k


def test_dual_feasibility_and_complementarity():
    for args in make_solver_corpus(count=25, seed=7):
        qp = QuadraticProgram(**args)
        sol = solve_qp(qp)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.ineq_duals.min(initial=0.0) >= -1e-10
        assert sol.lower_duals.min(initial=0.0) >= -1e-10
        assert sol.upper_duals.min(initial=0.0) >= -1e-10
        if qp.n_ineq:
            slack = qp.ineq_rhs - qp.ineq_matrix @ sol.primal
            comp = np.abs(sol.ineq_duals * slack) / (1 + np.abs(qp.ineq_rhs))
            assert comp.max() <= 1e-8


def test_scaling_covariance():
    args = seed42_problem()
    qp = QuadraticProgram(**args)
    base = solve_qp(qp)
    s = 37.5
    scaled = QuadraticProgram(s * np.asarray(args["objective_matrix"]),
                              s * np.asarray(args["objective_vector"]),
                              args["eq_matrix"], args["eq_rhs"],
                              args["ineq_matrix"], args["ineq_rhs"],
                              args["lower"], args["upper"])
    sol = solve_qp(scaled)
    assert np.abs(sol.primal - base.primal).max() < 1e-7
    # the solver's dual noise floor (kkt_tolerance) scales with s as well
    tol_eq = 1e-6 * (1 + s + np.abs(s * base.eq_duals))
    tol_in = 1e-6 * (1 + s + np.abs(s * base.ineq_duals))
    assert (np.abs(sol.eq_duals - s * base.eq_duals) <= tol_eq).all()
    assert (np.abs(sol.ineq_duals - s * base.ineq_duals) <= tol_in).all()


def test_bitwise_determinism():
    qp = QuadraticProgram(**seed42_problem())
    a = solve_qp(qp)
    b = solve_qp(qp)
    assert np.array_equal(a.primal, b.primal)
    assert np.array_equal(a.eq_duals, b.eq_duals)
    assert np.array_equal(a.ineq_duals, b.ineq_duals)
    assert a.iterations == b.iterations


def test_dense_sparse_backends_agree():
    args = seed42_problem()
    qp = QuadraticProgram(**args)
    d = solve_qp(qp, SolverConfig(backend="dense"))
    s = solve_qp(qp, SolverConfig(backend="sparse"))
    assert d.status is SolveStatus.OPTIMAL and s.status is SolveStatus.OPTIMAL
    assert np.abs(d.primal - s.primal).max() < 1e-7
    assert np.abs(d.eq_duals - s.eq_duals).max() < 1e-7


def test_status_infeasible():
    qp = QuadraticProgram([[2.0]], [0.0], ineq_matrix=[[1.0], [-1.0]],
                          ineq_rhs=[-1.0, -1.0])
    assert solve_qp(qp).status is SolveStatus.INFEASIBLE


def test_status_unbounded():
    qp = QuadraticProgram([[0.0]], [-1.0], lower=[0.0])
    assert solve_qp(qp).status is SolveStatus.UNBOUNDED


def test_unconstrained_and_equality_only():
    qp = QuadraticProgram([[2.0, 0.0], [0.0, 4.0]], [-2.0, -4.0])
    sol = solve_qp(qp)
    assert np.abs(sol.primal - [1.0, 1.0]).max() < 1e-8
    qp2 = QuadraticProgram([[2.0, 0.0], [0.0, 2.0]], [0.0, 0.0],
                           eq_matrix=[[1.0, 1.0]], eq_rhs=[2.0])
    sol2 = solve_qp(qp2)
    assert np.abs(sol2.primal - [1.0, 1.0]).max() < 1e-8


def test_validation_rejects_bad_input():
    with pytest.raises(ValueError, match="symmetric"):
        QuadraticProgram([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(ValueError, match="exceeds"):
        QuadraticProgram([[1.0]], [0.0], lower=[1.0], upper=[0.0])
    with pytest.raises(ValueError, match="shape"):
        QuadraticProgram([[1.0]], [0.0, 1.0])
    with pytest.raises(ValueError, match="finite"):
        QuadraticProgram([[1.0]], [np.nan])
    with pytest.raises(ValueError, match="columns"):
        QuadraticProgram([[1.0]], [0.0], eq_matrix=[[1.0, 2.0]], eq_rhs=[0.0])
    with pytest.raises(ValueError):
        SolverConfig(backend="gpu")


def test_redundant_equality_rows():
    qp = QuadraticProgram([[2.0, 0.0], [0.0, 2.0]], [0.0, 0.0],
                          eq_matrix=[[1.0, 1.0], [2.0, 2.0]], eq_rhs=[1.0, 2.0])
    sol = solve_qp(qp)
    assert sol.status is SolveStatus.OPTIMAL
    assert np.abs(sol.primal - [0.5, 0.5]).max() < 1e-7
