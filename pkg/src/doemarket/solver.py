"""Convex QP solver with dual extraction.

Problems are stated as

    min 1/2 x'Px + c'x
    s.t. A_eq x = b_eq          (duals y, free sign)
         A_in x <= b_in         (duals z >= 0)
         lower <= x <= upper    (duals zl, zu >= 0)

with the Lagrangian  L = obj + y'(A_eq x - b_eq) + z'(A_in x - b_in)
- zl'(x - lower) + zu'(x - upper), so stationarity reads
P x + c + A_eq'y + A_in'z - zl + zu = 0.  Multiplier accuracy is a
first-class output: market prices are read off these duals, so solutions
are certified against the original (unscaled) problem before being
declared optimal.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _ipm


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


def _as_vector(v, n, name):
    a = np.ascontiguousarray(v, dtype=np.float64)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    return a


def _as_matrix(m, ncols, name):
    if sp.issparse(m):
        a = m.tocsr().astype(np.float64)
    else:
        a = np.ascontiguousarray(m, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"{name} must be 2-dimensional")
    if a.shape[1] != ncols:
        raise ValueError(f"{name} must have {ncols} columns, got {a.shape[1]}")
    return a


class QuadraticProgram:
    """Validated QP data; matrices may be dense ndarrays or scipy sparse.

    Equality/inequality blocks are optional (pass None for an absent
    block); bounds default to -inf/+inf.  All finite data is required to
    be finite except the bound vectors, which may hold +-inf entries.
    """

    def __init__(self, objective_matrix, objective_vector,
                 eq_matrix=None, eq_rhs=None,
                 ineq_matrix=None, ineq_rhs=None,
                 lower=None, upper=None):
        P = objective_matrix
        if sp.issparse(P):
            P = P.tocsr().astype(np.float64)
            n = P.shape[0]
            asym = abs(P - P.T).max() if P.nnz else 0.0
            pmax = abs(P).max() if P.nnz else 0.0
        else:
            P = np.ascontiguousarray(P, dtype=np.float64)
            if P.ndim != 2:
                raise ValueError("objective_matrix must be 2-dimensional")
            n = P.shape[0]
            asym = np.abs(P - P.T).max() if n else 0.0
            pmax = np.abs(P).max() if n else 0.0
        if P.shape[0] != P.shape[1]:
            raise ValueError("objective_matrix must be square")
        if asym > 1e-12 * max(1.0, pmax):
            raise ValueError("objective_matrix must be symmetric (within 1e-12)")
        self.objective_matrix = P
        self.objective_vector = _as_vector(objective_vector, n, "objective_vector")
        self.n = n

        if eq_matrix is None or (hasattr(eq_matrix, "shape") and eq_matrix.shape[0] == 0):
            self.eq_matrix = np.zeros((0, n))
            self.eq_rhs = np.zeros(0)
        else:
            self.eq_matrix = _as_matrix(eq_matrix, n, "eq_matrix")
            self.eq_rhs = _as_vector(eq_rhs, self.eq_matrix.shape[0], "eq_rhs")
        if ineq_matrix is None or (hasattr(ineq_matrix, "shape") and ineq_matrix.shape[0] == 0):
            self.ineq_matrix = np.zeros((0, n))
            self.ineq_rhs = np.zeros(0)
        else:
            self.ineq_matrix = _as_matrix(ineq_matrix, n, "ineq_matrix")
            self.ineq_rhs = _as_vector(ineq_rhs, self.ineq_matrix.shape[0], "ineq_rhs")
        self.n_eq = self.eq_matrix.shape[0]
        self.n_ineq = self.ineq_matrix.shape[0]

        self.lower = (np.full(n, -np.inf) if lower is None
                      else _as_vector(lower, n, "lower"))
        self.upper = (np.full(n, np.inf) if upper is None
                      else _as_vector(upper, n, "upper"))
        if np.any(self.lower > self.upper):
            bad = int(np.argmax(self.lower > self.upper))
            raise ValueError(f"lower[{bad}] exceeds upper[{bad}]")

        for name in ("objective_vector", "eq_rhs", "ineq_rhs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        for name in ("objective_matrix", "eq_matrix", "ineq_matrix"):
            m = getattr(self, name)
            data = m.data if sp.issparse(m) else m
            if data.size and not np.all(np.isfinite(data)):
                raise ValueError(f"{name} must be finite")

    def objective_value(self, x):
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * (x @ (self.objective_matrix @ x))
                     + self.objective_vector @ x)


@dataclass
class SolverConfig:
    """Termination and backend knobs; defaults certify duals to 1e-8."""

    kkt_tolerance: float = 1e-8
    max_iterations: int = 200
    regularization_floor: float = 1e-10
    backend: str = "auto"  # auto | dense | sparse
    dense_variable_limit: int = 400
    dense_row_limit: int = 1500

    def __post_init__(self):
        if self.backend not in ("auto", "dense", "sparse"):
            raise ValueError("backend must be auto, dense or sparse")
        if self.kkt_tolerance <= 0:
            raise ValueError("kkt_tolerance must be positive")


@dataclass
class KktResiduals:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    complementarity: float

    def max(self):
        return max(self.stationarity, self.primal_eq,
                   self.primal_ineq, self.complementarity)


@dataclass
class KktReport:
    residuals: KktResiduals
    dual_feasibility_min: float
    tolerance: float
    passed: bool


@dataclass
class PrimalDualSolution:
    primal: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    lower_duals: np.ndarray
    upper_duals: np.ndarray
    status: SolveStatus
    kkt_residuals: KktResiduals
    iterations: int
    objective: float = 0.0


def _residuals(problem, x, y, z, zl, zu):
    """Unscaled KKT residual norms plus smallest inequality/bound dual."""
    P, c = problem.objective_matrix, problem.objective_vector
    r = P @ x + c
    if problem.n_eq:
        r = r + problem.eq_matrix.T @ y
    if problem.n_ineq:
        r = r + problem.ineq_matrix.T @ z
    r = r - zl + zu
    stat = float(np.abs(r).max()) if problem.n else 0.0

    peq = 0.0
    if problem.n_eq:
        peq = float(np.abs(problem.eq_matrix @ x - problem.eq_rhs).max())

    viol = 0.0
    comp = 0.0
    if problem.n_ineq:
        slack = problem.ineq_rhs - problem.ineq_matrix @ x
        viol = max(viol, float(np.maximum(-slack, 0.0).max()))
        comp = max(comp, float(
            (np.abs(z * slack) / (1.0 + np.abs(problem.ineq_rhs))).max()))
    lo_fin = np.isfinite(problem.lower)
    up_fin = np.isfinite(problem.upper)
    if lo_fin.any():
        gap = (x - problem.lower)[lo_fin]
        viol = max(viol, float(np.maximum(-gap, 0.0).max()))
        comp = max(comp, float((np.abs(zl[lo_fin] * gap)
                                / (1.0 + np.abs(problem.lower[lo_fin]))).max()))
    if up_fin.any():
        gap = (problem.upper - x)[up_fin]
        viol = max(viol, float(np.maximum(-gap, 0.0).max()))
        comp = max(comp, float((np.abs(zu[up_fin] * gap)
                                / (1.0 + np.abs(problem.upper[up_fin]))).max()))

    dual_min = 0.0
    parts = []
    if problem.n_ineq:
        parts.append(z.min())
    if lo_fin.any():
        parts.append(zl[lo_fin].min())
    if up_fin.any():
        parts.append(zu[up_fin].min())
    if parts:
        dual_min = float(min(parts))
    return KktResiduals(stat, peq, viol, comp), dual_min


def check_kkt(problem, candidate, tolerance=1e-8):
    """Verify a candidate solution against the problem's KKT system.

    Pure function of its inputs; passes iff all four residual norms are
    within tolerance and every inequality/bound dual is >= -1e-10.
    """
    res, dual_min = _residuals(problem, candidate.primal, candidate.eq_duals,
                               candidate.ineq_duals, candidate.lower_duals,
                               candidate.upper_duals)
    passed = res.max() <= tolerance and dual_min >= -1e-10
    return KktReport(res, dual_min, tolerance, passed)


def _fold_boxes(problem, want_sparse):
    """Append finite bounds to the inequality block as -x <= -l, x <= u.

    Pinned variables (lower == upper) are excluded: a degenerate box has
    no interior for the barrier, so the caller turns them into equality
    rows instead; their indices come back as pin_idx.
    """
    n = problem.n
    pinned = np.isfinite(problem.lower) & (problem.lower == problem.upper)
    pin_idx = np.flatnonzero(pinned)
    lo_idx = np.flatnonzero(np.isfinite(problem.lower) & ~pinned)
    up_idx = np.flatnonzero(np.isfinite(problem.upper) & ~pinned)
    nl, nu = lo_idx.size, up_idx.size
    mi = problem.n_ineq
    if want_sparse:
        blocks = [sp.csr_matrix(problem.ineq_matrix) if mi else None]
        if nl:
            L = sp.csr_matrix((-np.ones(nl), (np.arange(nl), lo_idx)), shape=(nl, n))
            blocks.append(L)
        if nu:
            U = sp.csr_matrix((np.ones(nu), (np.arange(nu), up_idx)), shape=(nu, n))
            blocks.append(U)
        blocks = [blk for blk in blocks if blk is not None]
        G = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, n))
    else:
        ineq = problem.ineq_matrix
        if sp.issparse(ineq):
            ineq = ineq.toarray()
        G = np.zeros((mi + nl + nu, n))
        G[:mi] = ineq
        G[mi + np.arange(nl), lo_idx] = -1.0
        G[mi + nl + np.arange(nu), up_idx] = 1.0
    h = np.concatenate([problem.ineq_rhs,
                        -problem.lower[lo_idx],
                        problem.upper[up_idx]])
    return G, h, lo_idx, up_idx, pin_idx


def _ruiz_equilibrate(P, c, A, G, passes=10):
    """Scale rows/cols of the KKT data toward unit inf-norms.

    Returns scaled copies plus (d, e_a, e_g, cost_scale); conditioning
    only, results are mapped back to the original problem afterwards.
    """
    sparse = sp.issparse(P)
    n = P.shape[0]
    me, mg = A.shape[0], G.shape[0]
    d = np.ones(n)
    ea = np.ones(me)
    eg = np.ones(mg)
    P = P.copy()
    A = A.copy()
    G = G.copy()

    def colmax(M):
        if M.shape[0] == 0:
            return np.zeros(M.shape[1])
        if sp.issparse(M):
            return np.asarray(abs(M).max(axis=0).todense()).ravel()
        return np.abs(M).max(axis=0)

    def rowmax(M):
        if M.shape[0] == 0:
            return np.zeros(0)
        if sp.issparse(M):
            return np.asarray(abs(M).max(axis=1).todense()).ravel()
        return np.abs(M).max(axis=1)

    for _ in range(passes):
        cm = np.maximum(colmax(P), np.maximum(colmax(A), colmax(G)))
        dx = 1.0 / np.sqrt(np.maximum(cm, 1e-12))
        np.clip(dx, 1e-6, 1e6, out=dx)
        ra = 1.0 / np.sqrt(np.maximum(rowmax(A), 1e-12)) if me else np.ones(0)
        rg = 1.0 / np.sqrt(np.maximum(rowmax(G), 1e-12)) if mg else np.ones(0)
        if me:
            np.clip(ra, 1e-6, 1e6, out=ra)
        if mg:
            np.clip(rg, 1e-6, 1e6, out=rg)
        if sparse:
            Dx = sp.diags(dx)
            P = Dx @ P @ Dx
            if me:
                A = sp.diags(ra) @ A @ Dx
            if mg:
                G = sp.diags(rg) @ G @ Dx
        else:
            P = dx[:, None] * P * dx[None, :]
            if me:
                A = ra[:, None] * A * dx[None, :]
            if mg:
                G = rg[:, None] * G * dx[None, :]
        d *= dx
        ea *= ra
        eg *= rg

    c_scaled = d * c
    pmax = float(colmax(P).max()) if n else 0.0
    cmax = float(np.abs(c_scaled).max()) if n else 0.0
    mag = max(pmax, cmax)
    cost = 1.0 if mag == 0.0 else float(np.clip(1.0 / mag, 1e-10, 1e10))
    P = P * cost
    c_scaled = c_scaled * cost
    return P, c_scaled, A, G, d, ea, eg, cost


def _pick_backend(problem, config, n_rows):
    if config.backend != "auto":
        return config.backend
    if (problem.n + problem.n_eq <= config.dense_variable_limit
            and n_rows <= config.dense_row_limit):
        return "dense"
    return "sparse"


def solve_qp(problem, config=None):
    """Solve a convex QP to the configured KKT tolerance.

    The returned multipliers satisfy the sign conventions documented in
    the module docstring; status is OPTIMAL only when the full KKT system
    of the original problem checks out at ``config.kkt_tolerance``,
    measured relative to the magnitudes of the problem data.
    """
    config = config or SolverConfig()
    tol = config.kkt_tolerance
    n = problem.n

    n_box_rows = int(np.isfinite(problem.lower).sum()
                     + np.isfinite(problem.upper).sum())
    backend = _pick_backend(problem, config, problem.n_ineq + n_box_rows)
    want_sparse = backend == "sparse"

    G, h, lo_idx, up_idx, pin_idx = _fold_boxes(problem, want_sparse)
    P, c = problem.objective_matrix, problem.objective_vector
    A, b = problem.eq_matrix, problem.eq_rhs
    if want_sparse:
        P = sp.csr_matrix(P)
        A = sp.csr_matrix(A) if problem.n_eq else sp.csr_matrix((0, n))
    else:
        if sp.issparse(P):
            P = P.toarray()
        if sp.issparse(A):
            A = A.toarray()
    npin = pin_idx.size
    if npin:
        # pinned boxes become equality rows x_i = l_i
        if want_sparse:
            E = sp.csr_matrix((np.ones(npin), (np.arange(npin), pin_idx)),
                              shape=(npin, n))
            A = sp.vstack([A, E], format="csr")
        else:
            E = np.zeros((npin, n))
            E[np.arange(npin), pin_idx] = 1.0
            A = np.vstack([A, E]) if A.size else E
        b = np.concatenate([b, problem.lower[pin_idx]])
    n_eq_all = problem.n_eq + npin

    Ps, cs, As, Gs, d, ea, eg, cost = _ruiz_equilibrate(P, c, A, G)
    bs = ea * b
    hs = eg * h

    # Residual norms transform as stat = r_hat/(cost*d), eq = r_hat/e,
    # comp = zh*sh/cost; push the kernel hard enough that the unscaled
    # residuals land within tol, floored near machine precision.
    d_min = float(d.min()) if n else 1.0
    e_min = float(min(ea.min() if ea.size else 1.0,
                      eg.min() if eg.size else 1.0))
    tol_stat = max(1e-13, tol * cost * d_min)
    tol_feas = max(1e-13, tol * e_min)
    tol_comp = max(1e-13, tol * cost)

    mg = Gs.shape[0]
    x = np.zeros(n)
    y = np.zeros(n_eq_all)
    z = np.ones(mg)
    s = np.ones(mg)
    kernel = _ipm.sparse_ipm if want_sparse else _ipm.dense_ipm

    # acceptance is relative to the problem's own magnitudes: absolute
    # 1e-8 stationarity against O(1e7) objective data would demand 1e-15
    # relative accuracy the arithmetic cannot deliver
    c_inf = float(np.abs(c).max()) if n else 0.0
    eq_ref = 1.0 + (float(np.abs(b).max()) if b.size else 0.0)
    in_ref = 1.0 + (float(np.abs(h).max()) if h.size else 0.0)

    delta = config.regularization_floor
    warm = False
    budget = config.max_iterations
    code = _ipm.ITER_LIMIT
    iters_total = 0
    best = None
    for attempt in range(4):
        if budget <= 0:
            break
        try:
            x, y, z, s, code, used = kernel(
                Ps, cs, As, bs, Gs, hs, x, y, z, s, warm,
                tol_stat, tol_feas, tol_comp, budget, delta)
        except Exception:
            # singular KKT system: retry from scratch with more regularization
            delta = max(delta * 1e3, 1e-8)
            warm = False
            x = np.zeros(n)
            y = np.zeros(n_eq_all)
            z = np.ones(mg)
            s = np.ones(mg)
            continue
        iters_total += used
        budget -= used
        xu = d * x
        y_all = ea * y / cost
        yu = y_all[:problem.n_eq]
        zu_all = eg * z / cost
        mi = problem.n_ineq
        z_in = zu_all[:mi]
        zl = np.zeros(n)
        zup = np.zeros(n)
        zl[lo_idx] = zu_all[mi:mi + lo_idx.size]
        zup[up_idx] = zu_all[mi + lo_idx.size:]
        if npin:
            omega = y_all[problem.n_eq:]
            zl[pin_idx] = np.maximum(-omega, 0.0)
            zup[pin_idx] = np.maximum(omega, 0.0)
        res, dual_min = _residuals(problem, xu, yu, z_in, zl, zup)
        px_inf = float(np.abs(P @ xu).max()) if n else 0.0
        stat_ref = 1.0 + max(c_inf, px_inf)
        comp_ref = max(stat_ref, eq_ref, in_ref)
        key = max(res.stationarity / stat_ref, res.primal_eq / eq_ref,
                  res.primal_ineq / in_ref, res.complementarity / comp_ref)
        ok = key <= tol and dual_min >= -1e-10
        if not np.isfinite(key):
            key = 1e300
        if best is None or key < best[0]:
            best = (key, xu, yu, z_in, zl, zup, res)
        if ok:
            return PrimalDualSolution(
                primal=xu, eq_duals=yu, ineq_duals=z_in,
                lower_duals=zl, upper_duals=zup,
                status=SolveStatus.OPTIMAL, kkt_residuals=res,
                iterations=iters_total,
                objective=problem.objective_value(xu))
        if code in (_ipm.STALLED, _ipm.DIVERGED):
            break
        # converged in scaled space but not tightly enough unscaled
        tol_stat = max(1e-14, tol_stat * 1e-2)
        tol_feas = max(1e-14, tol_feas * 1e-2)
        tol_comp = max(1e-14, tol_comp * 1e-2)
        warm = True

    if best is None:
        zeros = np.zeros
        res, _ = _residuals(problem, zeros(n), zeros(problem.n_eq),
                            zeros(problem.n_ineq), zeros(n), zeros(n))
        return PrimalDualSolution(
            primal=zeros(n), eq_duals=zeros(problem.n_eq),
            ineq_duals=zeros(problem.n_ineq), lower_duals=zeros(n),
            upper_duals=zeros(n), status=SolveStatus.MAX_ITERATIONS,
            kkt_residuals=res, iterations=iters_total,
            objective=problem.objective_value(zeros(n)))
    _, xu, yu, z_in, zl, zup, res = best
    if code == _ipm.STALLED:
        status = SolveStatus.INFEASIBLE
    elif code == _ipm.DIVERGED:
        status = SolveStatus.UNBOUNDED
    else:
        status = SolveStatus.MAX_ITERATIONS
    return PrimalDualSolution(
        primal=xu, eq_duals=yu, ineq_duals=z_in,
        lower_duals=zl, upper_duals=zup,
        status=status, kkt_residuals=res, iterations=iters_total,
        objective=problem.objective_value(xu))
