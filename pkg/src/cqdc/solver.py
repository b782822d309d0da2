"""Primal Newton log-barrier engine for small convex QPs.

Solves, for a batch of independent problems,

    minimize   0.5 x'Qx + b'x - (1/kappa) sum_i log(G_i x + e_i)

either at a fixed barrier weight (smoothed) or by path-following kappa
upward until the duality-gap proxy m/kappa is tiny (exact QP).  Problems in
a batch must share dimensions; callers pad missing rows with G_i = 0,
e_i = 1, which leave the objective unchanged.
"""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import Infeasible, SolverFailure

KAPPA0 = 100.0
GAP_TOL = 1e-8
MAX_NEWTON = 60
ARMIJO_C = 1e-4
BACKTRACK = 0.5
GRAD_TOL = 1e-11
FEAS_FRACTION = 0.99


@dataclass
class BatchSolution:
    x: np.ndarray          # (B, n)
    lam: np.ndarray        # (B, m) row multipliers
    slack: np.ndarray      # (B, m)
    iterations: np.ndarray  # (B,) total Newton iterations
    residual: np.ndarray   # (B,) final stationarity residual (inf-norm)
    kappa: float
    active: np.ndarray = None   # (B, m) exact mode only
    polished: np.ndarray = None  # (B,) exact mode only


def _mv(M, v):
    return np.einsum("bij,bj->bi", M, v)


def _mtv(M, v):
    return np.einsum("bji,bj->bi", M, v)


def _objective(Q, b, G, e, x, kappa):
    s = _mv(G, x) + e
    with np.errstate(invalid="ignore", divide="ignore"):
        logs = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)), -np.inf)
    return 0.5 * np.einsum("bi,bi->b", x, _mv(Q, x)) + np.einsum("bi,bi->b", b, x) \
        - logs.sum(axis=1) / kappa, s


def gradient(Q, b, G, e, x, kappa):
    s = _mv(G, x) + e
    return _mv(Q, x) + b - _mtv(G, 1.0 / s) / kappa


def hessian(Q, G, s, kappa):
    w = 1.0 / (kappa * s * s)
    return Q + np.einsum("bmi,bm,bmj->bij", G, w, G)


def phase_one(G, e, target):
    """Strictly feasible starting points: slack >= target where possible.

    Starts at x = 0 and pushes along violated row normals (simultaneous
    projections); anything still infeasible goes to an LP that maximizes
    the smallest normalized slack.
    """
    B, m, n = G.shape
    x = np.zeros((B, n))
    if m == 0:
        return x
    if np.all(e >= 0.5 * target):
        # the origin already has the slack the push loop would accept
        return x
    nrm2 = np.einsum("bmn,bmn->bm", G, G)
    zero_rows = nrm2 <= 1e-300
    if np.any(zero_rows & (e <= 0)):
        raise Infeasible("constant row with nonpositive offset")
    nrm2 = np.where(zero_rows, 1.0, nrm2)
    todo = np.flatnonzero((e < target).any(axis=1))
    for _ in range(200):
        if todo.size == 0:
            break
        s = _mv(G[todo], x[todo]) + e[todo]
        viol = np.where(zero_rows[todo], 0.0, np.maximum(target - s, 0.0))
        bad = viol.max(axis=1) > 0.5 * target
        todo = todo[bad]
        if todo.size == 0:
            break
        viol = viol[bad]
        x[todo] += _mtv(G[todo], viol / nrm2[todo])
    for k in todo:
        s = G[k] @ x[k] + e[k]
        if s.min() > 0:
            continue
        x[k] = _lp_phase_one(G[k], e[k], target)
    return x


def _lp_phase_one(G, e, target):
    m, n = G.shape
    norms = np.linalg.norm(G, axis=1)
    keep = norms > 0
    Gk, ek, nk = G[keep], e[keep], norms[keep]
    # variables (x, t): maximize t subject to G x + e >= t |G_i|, t <= target
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([-Gk, nk[:, None]])
    res = linprog(c, A_ub=A, b_ub=ek, bounds=[(-1e3, 1e3)] * n + [(None, target)],
                  method="highs")
    if res.status != 0 or res.x[-1] <= 1e-12:
        raise Infeasible("no strictly feasible point for the constraint rows")
    return res.x[:n]


def _solve_batch(H, g):
    """Batched solve; samples whose matrix is numerically singular use least squares."""
    try:
        return np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(g)
        for i in range(len(g)):
            try:
                out[i] = np.linalg.solve(H[i], g[i])
            except np.linalg.LinAlgError:
                out[i] = np.linalg.lstsq(H[i], g[i], rcond=None)[0]
        return out


def newton(Q, b, G, e, x, kappa, max_iter=MAX_NEWTON, grad_tol=GRAD_TOL, dec_tol=1e-26):
    """Damped Newton on the barrier objective at fixed kappa (batched)."""
    B, n = x.shape
    x = x.copy()
    iters = np.zeros(B, dtype=int)
    live = np.arange(B)
    for _ in range(max_iter):
        if live.size == 0:
            break
        Ql, bl, Gl, el, xl = Q[live], b[live], G[live], e[live], x[live]
        f, s = _objective(Ql, bl, Gl, el, xl, kappa)
        g = _mv(Ql, xl) + bl - _mtv(Gl, 1.0 / s) / kappa
        scale = 1.0 + np.abs(bl).max(axis=1)
        gn = np.abs(g).max(axis=1)
        H = hessian(Ql, Gl, s, kappa)
        dx = -_solve_batch(H, g)
        dec2 = -np.einsum("bi,bi->b", g, dx)
        done = (gn <= grad_tol * scale) | (dec2 <= dec_tol)
        ds = _mv(Gl, dx)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(ds < 0, -s / ds, np.inf)
        amax = np.minimum(1.0, FEAS_FRACTION * ratio.min(axis=1))
        alpha = amax.copy()
        near = dec2 < 1e-10
        accepted = near & (amax >= 1.0)
        pending = ~accepted & ~done
        slope = np.einsum("bi,bi->b", g, dx)
        for _ in range(60):
            if not pending.any():
                break
            idx = np.flatnonzero(pending)
            xn = xl[idx] + alpha[idx, None] * dx[idx]
            fn, sn = _objective(Ql[idx], bl[idx], Gl[idx], el[idx], xn, kappa)
            ok = np.isfinite(fn) & (fn <= f[idx] + ARMIJO_C * alpha[idx] * slope[idx]
                                    + 1e-15 * (1.0 + np.abs(f[idx])))
            ok &= (sn > 0).all(axis=1)
            accepted[idx[ok]] = True
            pending[idx[ok]] = False
            alpha[idx[~ok]] *= BACKTRACK
        stalled = pending  # line search could not make progress
        step = accepted & ~done
        x[live[step]] = xl[step] + alpha[step, None] * dx[step]
        iters[live] += 1
        finished = done | stalled
        live = live[~finished]
    resid = np.abs(gradient(Q, b, G, e, x, kappa)).max(axis=1)
    return x, iters, resid


def _check_inputs(Q, b, G, e):
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    G = np.asarray(G, dtype=float)
    e = np.asarray(e, dtype=float)
    if Q.ndim == 2:
        Q, b, G, e = Q[None], b[None], G[None], e[None]
    return Q, b, G, e


def solve_smoothed(Q, b, G, e, kappa, x0=None, target=0.05, n_rows=None):
    """Minimize the barrier objective at fixed ``kappa``.

    Internally walks kappa up from min(kappa, KAPPA0) by factors of ten with
    warm starts; the minimizer is unique so the path only affects speed.
    """
    Q, b, G, e = _check_inputs(Q, b, G, e)
    B, n = b.shape
    m = G.shape[1]
    if m == 0:
        x = -np.linalg.solve(Q, b[..., None])[..., 0]
        r = np.abs(_mv(Q, x) + b).max(axis=1)
        return BatchSolution(x, np.zeros((B, 0)), np.zeros((B, 0)), np.ones(B, dtype=int), r, kappa)
    x = phase_one(G, e, target) if x0 is None else np.array(x0, dtype=float).reshape(B, n)
    total = np.zeros(B, dtype=int)
    k = min(kappa, KAPPA0)
    while True:
        final = k >= kappa
        x, it, resid = newton(Q, b, G, e, x, k,
                              grad_tol=GRAD_TOL if final else 1e-6,
                              dec_tol=1e-26 if final else 1e-12)
        total += it
        if final:
            break
        k = min(kappa, 10.0 * k)
    s = _mv(G, x) + e
    scale = 1.0 + np.abs(b).max(axis=1) + np.abs(Q).max(axis=(1, 2))
    if np.any(~np.isfinite(x)) or np.any(resid > 1e-6 * scale):
        raise SolverFailure("Newton did not converge", float(np.nanmax(resid)))
    return BatchSolution(x, 1.0 / (kappa * s), s, total, resid, kappa)


def solve_qp(Q, b, G, e, x0=None, target=0.05, n_rows=None, polish=True, extra_stages=8):
    """Exact QP by barrier path-following with active-set polishing.

    kappa grows by factors of ten from KAPPA0.  After each stage the rows
    with slack^2 * kappa < 1 are taken as the active set and the
    equality-constrained KKT system is solved; a problem is finished once
    that solution is primal and dual feasible, which makes it the exact QP
    optimum.  Problems that never verify stop at kappa = 10^extra_stages
    times m / GAP_TOL and return the barrier iterate.
    """
    Q, b, G, e = _check_inputs(Q, b, G, e)
    B, n = b.shape
    m = G.shape[1]
    m_real = m if n_rows is None else max(int(n_rows), 1)
    if m == 0:
        sol = solve_smoothed(Q, b, G, e, 1.0)
        sol.active = np.zeros((B, 0), dtype=bool)
        sol.polished = np.ones(B, dtype=bool)
        return sol
    k_gap = m_real / GAP_TOL
    k_max = k_gap * 10.0 ** extra_stages
    x = phase_one(G, e, target) if x0 is None else np.array(x0, dtype=float).reshape(B, n)
    s = _mv(G, x) + e
    sol = BatchSolution(x, np.zeros((B, m)), s, np.zeros(B, dtype=int), np.full(B, np.inf), k_gap,
                        active=np.zeros((B, m), dtype=bool), polished=np.zeros(B, dtype=bool))
    if polish:
        # guess: the rows violated by the unconstrained minimizer; accepted only
        # when the resulting KKT point verifies
        x_unc = -np.linalg.solve(Q, b[..., None])[..., 0]
        sol.active = _mv(G, x_unc) + e < 0
        _polish(Q, b, G, e, sol)
        for i in np.flatnonzero(~sol.polished):
            sol.x[i], sol.slack[i], sol.lam[i] = x[i], s[i], 0.0
        sol.active[~sol.polished] = False
    k = KAPPA0
    while True:
        todo = np.flatnonzero(~sol.polished)
        if todo.size == 0:
            break
        tight = k >= k_gap
        xt, it, resid = newton(Q[todo], b[todo], G[todo], e[todo], sol.x[todo], k,
                               grad_tol=GRAD_TOL if tight else 1e-6,
                               dec_tol=1e-26 if tight else 1e-12)
        s = _mv(G[todo], xt) + e[todo]
        sol.x[todo] = xt
        sol.slack[todo] = s
        sol.lam[todo] = 1.0 / (k * s)
        sol.iterations[todo] += it
        sol.residual[todo] = resid
        sol.active[todo] = s ** 2 * k < 1.0
        if polish:
            _polish(Q, b, G, e, sol, todo)
        if k >= k_max or (not polish and tight):
            break
        k *= 10.0
    if np.any(~np.isfinite(sol.x)):
        raise SolverFailure("Newton diverged", float(np.nanmax(sol.residual)))
    return sol


def _polish(Q, b, G, e, sol, subset=None):
    B, n = sol.x.shape
    subset = np.arange(B) if subset is None else np.asarray(subset)
    patterns, inverse = np.unique(sol.active[subset], axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for p, pat in enumerate(patterns):
        idx = subset[inverse == p]
        rows = np.flatnonzero(pat)
        k = rows.size
        Ga = G[idx][:, rows, :]
        K = np.zeros((idx.size, n + k, n + k))
        K[:, :n, :n] = Q[idx]
        K[:, :n, n:] = -np.transpose(Ga, (0, 2, 1))
        K[:, n:, :n] = Ga
        rhs = np.concatenate([-b[idx], -e[idx][:, rows]], axis=1)
        try:
            z = np.linalg.solve(K, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            z = np.full((idx.size, n + k), np.nan)
        ok = _verify(G[idx], e[idx], z, n)
        with np.errstate(invalid="ignore"):
            kres = np.abs(np.einsum("bij,bj->bi", K, np.nan_to_num(z)) - rhs).max(axis=1)
        ok &= kres <= 1e-9 * (1.0 + np.abs(rhs).max(axis=1))
        for j in np.flatnonzero(~ok):
            # duplicated active rows make K singular but consistent: take the
            # minimum-norm multipliers when the system is solved exactly
            zj = np.linalg.lstsq(K[j], rhs[j], rcond=None)[0]
            if np.abs(K[j] @ zj - rhs[j]).max() <= 1e-10 * (1.0 + np.abs(rhs[j]).max()):
                z[j] = zj
                ok[j] = _verify(G[idx[j]][None], e[idx[j]][None], zj[None], n)[0]
        x = z[:, :n]
        lam = z[:, n:]
        s = _mv(G[idx], x) + e[idx]
        good = np.flatnonzero(ok)
        i = idx[good]
        full = np.zeros((good.size, G.shape[1]))
        full[:, rows] = np.maximum(lam[good], 0.0)
        sol.x[i] = x[good]
        sol.lam[i] = full
        sol.slack[i] = s[good]
        r = np.einsum("bij,bj->bi", Q[i], x[good]) + b[i] - np.einsum("bmi,bm->bi", G[i], full)
        sol.residual[i] = np.abs(r).max(axis=1, initial=0.0)
        sol.polished[i] = True


def _verify(G, e, z, n):
    """Primal and dual feasibility of candidate KKT solutions."""
    ok = np.isfinite(z).all(axis=1)
    zz = np.where(np.isfinite(z), z, 0.0)
    x, lam = zz[:, :n], zz[:, n:]
    s = _mv(G, x) + e
    tol = 1e-10 * (1.0 + np.abs(e).max(axis=1, initial=0.0))
    ok &= (s >= -tol[:, None]).all(axis=1)
    ok &= (lam >= -1e-10 * (1.0 + np.abs(lam).max(axis=1, initial=0.0))[:, None]).all(axis=1)
    return ok
