"""Primal-dual interior-point iterations for convex QPs.

Both kernels operate on the slack form

    min 1/2 x'Px + c'x   s.t.  A x = b,  G x + s = h,  s >= 0,

run a Mehrotra predictor-corrector loop and stop on scaled residual
tolerances supplied by the caller (``doemarket.solver`` maps them back to the
unscaled problem).  The dense kernel is the hot path for the many small QPs
solved during market clearing and is numba-compiled when acceleration is on;
the sparse twin handles large stacked problems via SuperLU.
"""

import numpy as np

from .accel import maybe_njit

CONVERGED = 0
ITER_LIMIT = 1
STALLED = 2
DIVERGED = 3

_STEP_SCALE = 0.9995
_DIVERGE_LIMIT = 1e12


@maybe_njit
def _max_step(v, dv):
    """Largest a with v + a*dv >= 0 (v > 0 assumed)."""
    a = 1e20
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            r = -v[i] / dv[i]
            if r < a:
                a = r
    return a


@maybe_njit
def dense_ipm(P, c, A, b, G, h, x0, y0, z0, s0, warm,
              tol_stat, tol_feas, tol_comp, max_iter, delta):
    """Mehrotra loop on dense arrays; returns (x, y, z, s, code, iters)."""
    n = P.shape[0]
    me = A.shape[0]
    mg = G.shape[0]
    x = x0.copy()
    y = y0.copy()
    z = z0.copy()
    s = s0.copy()
    if not warm:
        for i in range(n):
            x[i] = 0.0
        for i in range(me):
            y[i] = 0.0
        if mg > 0:
            sg = h - G @ x
            mn = sg[0]
            for j in range(mg):
                if sg[j] < mn:
                    mn = sg[j]
            shift = 1.0
            if mn < 1.0:
                shift = 1.0 - mn
            for j in range(mg):
                s[j] = sg[j] + shift
                z[j] = 1.0

    dim = n + me
    K = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    status = ITER_LIMIT
    iters = 0
    mu0 = 1.0
    if mg > 0:
        mu0 = z @ s / mg
        if mu0 < 1.0:
            mu0 = 1.0
    feas_best = 1e300
    stall = 0
    # late iterations can degrade past the best point found (the barrier
    # collapses before the duals settle); hand back the best iterate
    merit_best = 1e300
    xb = x.copy()
    yb = y.copy()
    zb = z.copy()
    sb = s.copy()

    for it in range(max_iter):
        iters = it + 1
        rd = P @ x + c + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        nrd = np.abs(rd).max()
        nrp = 0.0
        if me > 0:
            nrp = np.abs(rp).max()
        nrg = 0.0
        comp = 0.0
        mu = 0.0
        if mg > 0:
            nrg = np.abs(rg).max()
            mu = z @ s / mg
            comp = np.abs(z * s).max()
        merit = nrd / tol_stat
        if nrp / tol_feas > merit:
            merit = nrp / tol_feas
        if nrg / tol_feas > merit:
            merit = nrg / tol_feas
        if comp / tol_comp > merit:
            merit = comp / tol_comp
        if np.isfinite(merit) and merit < merit_best:
            merit_best = merit
            xb[:] = x
            yb[:] = y
            zb[:] = z
            sb[:] = s
        if nrd <= tol_stat and nrp <= tol_feas and nrg <= tol_feas and comp <= tol_comp:
            status = CONVERGED
            break
        feas = nrp if nrp > nrg else nrg
        if not (np.isfinite(nrd) and np.isfinite(nrp) and np.isfinite(nrg)
                and np.isfinite(comp)):
            status = STALLED if feas > 1e3 * tol_feas else DIVERGED
            break
        if np.abs(x).max() > _DIVERGE_LIMIT:
            status = STALLED if feas > 1e3 * tol_feas else DIVERGED
            break
        if mg > 0 and s.min() < 1e-150:
            status = STALLED
            break
        if feas < 0.5 * feas_best:
            feas_best = feas
            stall = 0
        else:
            stall += 1
        if mg > 0 and mu < 1e-9 * mu0 and feas > 1e3 * tol_feas and stall > 12:
            status = STALLED
            break

        K[:, :] = 0.0
        K[:n, :n] = P
        if mg > 0:
            w = z / s
            K[:n, :n] += G.T @ (G * w.reshape(-1, 1))
        for i in range(n):
            K[i, i] += delta
        if me > 0:
            K[:n, n:] = A.T
            K[n:, :n] = A
            for i in range(me):
                K[n + i, n + i] = -delta

        base = -(P @ x + c + A.T @ y)
        if mg > 0:
            w = z / s
            wrg = G.T @ (w * rg)
            rhs[:n] = base - wrg
        else:
            rhs[:n] = base
        rhs[n:] = -rp
        d1 = np.linalg.solve(K, rhs)
        dx = d1[:n]
        dy = d1[n:]

        if mg > 0:
            ds = -rg - G @ dx
            dz = -z - w * ds
            # common step length: with P != 0 the dual residual only
            # contracts if primal and dual move together
            aff = _max_step(s, ds)
            adz = _max_step(z, dz)
            if adz < aff:
                aff = adz
            if aff > 1.0:
                aff = 1.0
            mu_aff = ((z + aff * dz) @ (s + aff * ds)) / mg
            sigma = (mu_aff / mu) ** 3
            if sigma < 1e-8:
                sigma = 1e-8
            if sigma > 1.0:
                sigma = 1.0
            corr = np.empty(mg)
            for j in range(mg):
                v = (sigma * mu - dz[j] * ds[j]) / s[j]
                if not np.isfinite(v):
                    v = 0.0
                elif v > 1e12:
                    v = 1e12
                elif v < -1e12:
                    v = -1e12
                corr[j] = v
            rhs[:n] = base - wrg - G.T @ corr
            rhs[n:] = -rp
            d2 = np.linalg.solve(K, rhs)
            dx = d2[:n]
            dy = d2[n:]
            ds = -rg - G @ dx
            dz = corr - z - w * ds
            a = _max_step(s, ds)
            adz = _max_step(z, dz)
            if adz < a:
                a = adz
            a *= _STEP_SCALE
            if a > 1.0:
                a = 1.0
            x += a * dx
            s += a * ds
            y += a * dy
            z += a * dz
        else:
            x += dx
            y += dy
    return xb, yb, zb, sb, status, iters


def sparse_ipm(P, c, A, b, G, h, x0, y0, z0, s0, warm,
               tol_stat, tol_feas, tol_comp, max_iter, delta):
    """Sparse twin of dense_ipm; P, A, G are scipy CSR matrices."""
    import scipy.sparse as sp
    from scipy.sparse.linalg import splu

    n = P.shape[0]
    me = A.shape[0]
    mg = G.shape[0]
    x = x0.copy()
    y = y0.copy()
    z = z0.copy()
    s = s0.copy()
    if not warm:
        x[:] = 0.0
        y[:] = 0.0
        if mg > 0:
            sg = h - G @ x
            shift = max(1.0, 1.0 - sg.min())
            s = sg + shift
            z = np.ones(mg)

    eye_n = sp.identity(n, format="csr")
    status = ITER_LIMIT
    iters = 0
    mu0 = max(1.0, z @ s / mg) if mg > 0 else 1.0
    feas_best = np.inf
    stall = 0
    merit_best = np.inf
    xb, yb, zb, sb = x.copy(), y.copy(), z.copy(), s.copy()

    for it in range(max_iter):
        iters = it + 1
        rd = P @ x + c + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        nrd = np.abs(rd).max()
        nrp = np.abs(rp).max() if me > 0 else 0.0
        nrg = np.abs(rg).max() if mg > 0 else 0.0
        mu = z @ s / mg if mg > 0 else 0.0
        comp = np.abs(z * s).max() if mg > 0 else 0.0
        merit = max(nrd / tol_stat, nrp / tol_feas,
                    nrg / tol_feas, comp / tol_comp)
        if np.isfinite(merit) and merit < merit_best:
            merit_best = merit
            xb[:], yb[:], zb[:], sb[:] = x, y, z, s
        if nrd <= tol_stat and nrp <= tol_feas and nrg <= tol_feas and comp <= tol_comp:
            status = CONVERGED
            break
        feas = max(nrp, nrg)
        if not np.isfinite(max(nrd, nrp, nrg, comp)):
            status = STALLED if feas > 1e3 * tol_feas else DIVERGED
            break
        if np.abs(x).max() > _DIVERGE_LIMIT:
            status = STALLED if feas > 1e3 * tol_feas else DIVERGED
            break
        if mg > 0 and s.min() < 1e-150:
            status = STALLED
            break
        if feas < 0.5 * feas_best:
            feas_best = feas
            stall = 0
        else:
            stall += 1
        if mg > 0 and mu < 1e-9 * mu0 and feas > 1e3 * tol_feas and stall > 12:
            status = STALLED
            break

        if mg > 0:
            w = z / s
            Pw = P + G.T @ sp.diags(w) @ G + delta * eye_n
        else:
            Pw = P + delta * eye_n
        if me > 0:
            K = sp.bmat(
                [[Pw, A.T], [A, -delta * sp.identity(me)]], format="csc"
            )
        else:
            K = Pw.tocsc()
        lu = splu(K, permc_spec="COLAMD")

        rhs = np.empty(n + me)
        base = -(P @ x + c + A.T @ y)
        if mg > 0:
            wrg = G.T @ (w * rg)
            rhs[:n] = base - wrg
        else:
            rhs[:n] = base
        rhs[n:] = -rp
        d1 = lu.solve(rhs)
        dx = d1[:n]
        dy = d1[n:]

        if mg > 0:
            ds = -rg - G @ dx
            dz = -z - w * ds
            aff = min(1.0, _max_step(s, ds), _max_step(z, dz))
            mu_aff = ((z + aff * dz) @ (s + aff * ds)) / mg
            sigma = min(1.0, max(1e-8, (mu_aff / mu) ** 3))
            with np.errstate(over="ignore", invalid="ignore"):
                corr = (sigma * mu - dz * ds) / s
            corr = np.clip(np.nan_to_num(corr, nan=0.0, posinf=1e12, neginf=-1e12),
                           -1e12, 1e12)
            rhs[:n] = base - wrg - G.T @ corr
            rhs[n:] = -rp
            d2 = lu.solve(rhs)
            dx = d2[:n]
            dy = d2[n:]
            ds = -rg - G @ dx
            dz = corr - z - w * ds
            a = min(1.0, _STEP_SCALE * min(_max_step(s, ds), _max_step(z, dz)))
            x += a * dx
            s += a * ds
            y += a * dy
            z += a * dz
        else:
            x += dx
            y += dy
    return xb, yb, zb, sb, status, iters
