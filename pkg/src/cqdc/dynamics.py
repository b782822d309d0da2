"""Quasi-dynamic contact time-stepping for planar systems.

One step solves the convex program

    min_dq  0.5 dq'Q dq + b'dq   s.t.  (J_n +/- mu J_t) dq + phi >= 0

with Q = blockdiag(eps M_u / h, h K_a) and b = -h [tau_u; K_a (u - q_a) + tau_a]
over q = (q_u, q_a).  The exact step solves the QP; the smoothed step replaces
the constraints by a log-barrier of weight 1/kappa.  Derivatives come from
implicit differentiation of the respective optimality conditions.
"""
from dataclasses import dataclass, field

import numpy as np

from . import geometry, solver
from .errors import DegenerateActiveSet, RankDeficient, SolverFailure

FD_GEOMETRY_STEP = 1e-6
LAMBDA_TOL = 1e-9
SLACK_TOL = 1e-9


@dataclass(frozen=True)
class ContactPair:
    a: int
    b: int
    mu: float = 0.5


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Immutable quasi-dynamic system description.

    ``kinematics.forward(q)`` must return body poses (nb, 3) and their
    Jacobians (nb, 3, nq).  Angle coordinates of q_u are flagged in
    ``angle_mask``; the dynamics treats them as plain coordinates.
    """
    name: str
    n_u: int
    n_a: int
    M_u: np.ndarray
    K_a: np.ndarray
    tau_u: np.ndarray
    tau_a: np.ndarray
    geometries: tuple
    pairs: tuple
    kinematics: object
    eps_reg: float = 1e-4
    margin: float = 0.5
    q_lo: np.ndarray = None
    q_hi: np.ndarray = None
    angle_mask: np.ndarray = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        K = np.asarray(self.K_a, dtype=float)
        if K.shape != (self.n_a,) or np.any(K <= 0):
            raise ValueError("K_a must hold n_a strictly positive stiffnesses")
        if self.eps_reg < 0:
            raise ValueError("eps_reg must be nonnegative")
        if self.n_u > 0 and self.eps_reg == 0:
            raise ValueError("eps_reg = 0 with unactuated DOFs is unsupported")
        M = np.asarray(self.M_u, dtype=float).reshape(self.n_u, self.n_u)
        if self.n_u and (not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0):
            raise ValueError("M_u must be symmetric positive definite")
        for p in self.pairs:
            if p.mu < 0:
                raise ValueError("friction coefficients must be nonnegative")
        object.__setattr__(self, "K_a", K)
        object.__setattr__(self, "M_u", M)
        object.__setattr__(self, "tau_u", np.asarray(self.tau_u, dtype=float).reshape(self.n_u))
        object.__setattr__(self, "tau_a", np.asarray(self.tau_a, dtype=float).reshape(self.n_a))
        if self.angle_mask is None:
            object.__setattr__(self, "angle_mask", np.zeros(self.n_u, dtype=bool))

    @property
    def n_q(self):
        return self.n_u + self.n_a

    def split(self, q):
        q = np.asarray(q, dtype=float)
        return q[..., :self.n_u], q[..., self.n_u:]


@dataclass
class QpData:
    Q: np.ndarray
    b: np.ndarray
    G: np.ndarray          # constraint rows, (m, nq)
    e: np.ndarray          # row offsets phi, (m,)
    contacts: geometry.ContactSet
    row_contact: np.ndarray  # contact index of each row
    row_sign: np.ndarray     # +1 / -1 friction side, 0 frictionless

    @property
    def n_rows(self):
        return self.G.shape[0]


@dataclass
class StepResult:
    q_next: np.ndarray
    dq: np.ndarray
    impulses: np.ndarray    # (n_contacts, 2) normal / tangential, N s
    row_impulses: np.ndarray
    slack: np.ndarray
    mode: str
    kappa: float
    iterations: int
    residual: float
    qp: QpData = None
    active: np.ndarray = None
    polished: bool = False


@dataclass
class LocalModel:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    q_nominal: np.ndarray
    u_nominal: np.ndarray
    mode: str
    stderr: dict = None

    def predict(self, q, u):
        return self.A @ (np.asarray(q) - self.q_nominal) + self.B @ (np.asarray(u) - self.u_nominal) + self.c


def cost_matrix(model, h):
    n_u, n_a = model.n_u, model.n_a
    Q = np.zeros((model.n_q, model.n_q))
    Q[:n_u, :n_u] = model.eps_reg * model.M_u / h
    Q[n_u:, n_u:] = np.diag(h * model.K_a)
    return Q


def cost_vector(model, q, u, h):
    q_a = np.asarray(q, dtype=float)[model.n_u:]
    u = np.asarray(u, dtype=float).reshape(model.n_a)
    return -h * np.concatenate([model.tau_u, model.K_a * (u - q_a) + model.tau_a])


def constraint_rows(contacts):
    """Stack (J_n + mu J_t, J_n - mu J_t) per frictional contact, J_n otherwise."""
    rows, offs, owner, sign = [], [], [], []
    for i in range(len(contacts)):
        jn, jt, mu, phi = contacts.J_n[i], contacts.J_t[i], contacts.mu[i], contacts.phi[i]
        if mu > 0:
            rows += [jn + mu * jt, jn - mu * jt]
            offs += [phi, phi]
            owner += [i, i]
            sign += [1, -1]
        else:
            rows.append(jn)
            offs.append(phi)
            owner.append(i)
            sign.append(0)
    nq = contacts.J_n.shape[1]
    G = np.array(rows).reshape(-1, nq)
    return G, np.array(offs, dtype=float), np.array(owner, dtype=int), np.array(sign, dtype=int)


def _sweep(qs, Q, b):
    """Midpoint and end of the contact-free motion from each q.

    Contacts near either are activated too, so a long commanded move
    cannot pass into a body that was beyond the margin at the start.
    """
    dq = -np.linalg.solve(Q, np.atleast_2d(b).T).T.reshape(np.shape(qs))
    return [qs + 0.5 * dq, qs + dq]


def assemble_qp(model, q, u, h, keys=None):
    """Cost and constraint data of one step at (q, u)."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    q = np.asarray(q, dtype=float)
    Q, b = cost_matrix(model, h), cost_vector(model, q, u, h)
    sweep = _sweep(q, Q, b) if keys is None else ()
    contacts = geometry.contact_set(model, q, keys=keys, sweep=sweep)
    G, e, owner, sign = constraint_rows(contacts)
    return QpData(Q, b, G, e, contacts, owner, sign)


def _impulses(qp, lam_rows):
    k = len(qp.contacts)
    out = np.zeros((k, 2))
    for r, (i, s) in enumerate(zip(qp.row_contact, qp.row_sign)):
        out[i, 0] += lam_rows[r]
        if s != 0:
            out[i, 1] += s * qp.contacts.mu[i] * lam_rows[r]
    return out


def _result(model, q, qp, sol, mode, kappa):
    q = np.asarray(q, dtype=float)
    dq = sol.x[0].copy()
    lam = sol.lam[0].copy()
    return StepResult(q + dq, dq, _impulses(qp, lam), lam, sol.slack[0].copy(), mode, kappa,
                      int(sol.iterations[0]), float(sol.residual[0]), qp,
                      None if sol.active is None else sol.active[0].copy(),
                      bool(sol.polished[0]) if sol.polished is not None else False)


def _target(model):
    return 0.1 * model.margin


def step_exact(model, q, u, h):
    """Exact step: the QP solved by barrier path-following plus active-set polish."""
    qp = assemble_qp(model, q, u, h)
    sol = solver.solve_qp(qp.Q, qp.b, qp.G, qp.e, target=_target(model))
    return _result(model, q, qp, sol, "exact", sol.kappa)


def step_smoothed(model, q, u, h, kappa):
    """Log-barrier smoothed step at weight ``kappa``."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    qp = assemble_qp(model, q, u, h)
    sol = solver.solve_smoothed(qp.Q, qp.b, qp.G, qp.e, kappa, target=_target(model))
    return _result(model, q, qp, sol, "smoothed", kappa)


def step(model, q, u, h, kappa=None):
    return step_exact(model, q, u, h) if kappa is None else step_smoothed(model, q, u, h, kappa)


def _batch_solve(model, qs, us, h, kappa, keep_qp):
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    us = np.atleast_2d(np.asarray(us, dtype=float))
    N = max(len(qs), len(us))
    if len(qs) == 1 and N > 1:
        qs = np.repeat(qs, N, axis=0)
    if len(us) == 1 and N > 1:
        us = np.repeat(us, N, axis=0)
    nq = model.n_q
    Q1 = cost_matrix(model, h)
    q_a = qs[:, model.n_u:]
    b = -h * np.concatenate([np.broadcast_to(model.tau_u, (N, model.n_u)),
                             model.K_a * (us - q_a) + model.tau_a], axis=1)
    qps = None
    sweep = _sweep(qs, Q1, b)
    if not keep_qp:
        G, e, live = geometry.contact_rows_batch(model, qs, sweep=sweep)
        m_real = int(live.sum(axis=1).max(initial=0))
    else:
        sets = [geometry.contact_set(model, q, sweep=(s0, s1)) for q, s0, s1 in zip(qs, *sweep)]
        rows = [constraint_rows(c) for c in sets]
        m_real = max(r[0].shape[0] for r in rows)
        G = np.zeros((N, m_real, nq))
        e = np.ones((N, m_real))
        for i, (Gi, ei, _, _) in enumerate(rows):
            G[i, :Gi.shape[0]] = Gi
            e[i, :Gi.shape[0]] = ei
        qps = [QpData(Q1, b[i], r[0], r[1], c, r[2], r[3]) for i, (r, c) in enumerate(zip(rows, sets))]
    Q = np.broadcast_to(Q1, (N, nq, nq))
    if kappa is None:
        sol = solver.solve_qp(Q, b, G, e, target=_target(model), n_rows=m_real)
    else:
        sol = solver.solve_smoothed(Q, b, G, e, kappa, target=_target(model))
    return qs, sol, qps


def step_batch(model, qs, us, h, kappa=None):
    """Next configurations for many (q, u) pairs; returns an (N, nq) array.

    Contact geometry is evaluated for the whole batch at once; rows a sample
    does not activate are inert, so the Newton iterations run vectorized.
    """
    qs, sol, _ = _batch_solve(model, qs, us, h, kappa, False)
    return qs + sol.x


def step_batch_results(model, qs, us, h, kappa=None):
    """Like ``step_batch`` but returns one StepResult per sample."""
    qs, sol, qps = _batch_solve(model, qs, us, h, kappa, True)
    mode = "exact" if kappa is None else "smoothed"
    out = []
    for i, qp in enumerate(qps):
        m = qp.n_rows
        lam = sol.lam[i, :m].copy()
        active = None if sol.active is None else sol.active[i, :m].copy()
        polished = bool(sol.polished[i]) if sol.polished is not None else False
        out.append(StepResult(qs[i] + sol.x[i], sol.x[i].copy(), _impulses(qp, lam), lam,
                              sol.slack[i, :m].copy(), mode, sol.kappa if kappa is None else kappa,
                              int(sol.iterations[i]), float(sol.residual[i]), qp, active, polished))
    return out


def _row_derivatives(model, q, qp):
    """dG/dq (m, nq, nq) by central differences of the geometry, de/dq (m, nq) analytic."""
    keys = qp.contacts.keys
    nq = model.n_q
    m = qp.n_rows
    dG = np.zeros((m, nq, nq))
    if m == 0:
        return dG, np.zeros((0, nq))
    d = FD_GEOMETRY_STEP
    for j in range(nq):
        qp_ = np.array(q, dtype=float)
        qm_ = np.array(q, dtype=float)
        qp_[j] += d
        qm_[j] -= d
        Gp = constraint_rows(geometry.contact_set(model, qp_, keys=keys))[0]
        Gm = constraint_rows(geometry.contact_set(model, qm_, keys=keys))[0]
        dG[:, :, j] = (Gp - Gm) / (2 * d)
    de = qp.contacts.J_n[qp.row_contact]
    return dG, de


def _db(model, h):
    """Partial derivatives of the cost vector b with respect to q and u."""
    nq, n_u = model.n_q, model.n_u
    db_dq = np.zeros((nq, nq))
    db_dq[n_u:, n_u:] = np.diag(h * model.K_a)
    db_du = np.zeros((nq, model.n_a))
    db_du[n_u:, :] = -np.diag(h * model.K_a)
    return db_dq, db_du


def linearize(model, q, u, h, kappa=None, result=None):
    """Local affine model (A, B, c) of the exact (kappa=None) or smoothed step.

    Exact mode differentiates the KKT system restricted to the active rows
    and raises DegenerateActiveSet when a row is weakly active.
    """
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float).reshape(model.n_a)
    res = result if result is not None else step(model, q, u, h, kappa)
    qp = res.qp
    x = res.dq
    nq = model.n_q
    db_dq, db_du = _db(model, h)
    dG, de = _row_derivatives(model, q, qp)
    if kappa is not None:
        s = qp.G @ x + qp.e
        w = 1.0 / (kappa * s)
        H = qp.Q + qp.G.T @ (qp.G * (w / s)[:, None])
        # dF/dq_j = db/dq_j - dG_j' w + G' diag(w/s) (dG_j x + de_j)
        ds_dq = np.einsum("mij,i->mj", dG, x) + de
        dF_dq = db_dq - np.einsum("mij,m->ij", dG, w) + qp.G.T @ (ds_dq * (w / s)[:, None])
        dx = -np.linalg.solve(H, np.hstack([dF_dq, db_du]))
        mode = f"smoothed({kappa:g})"
    else:
        dx = _kkt_sensitivity(model, res, dG, de, db_dq, db_du)
        mode = "exact"
    A = np.eye(nq) + dx[:, :nq]
    B = dx[:, nq:]
    return LocalModel(A, B, res.q_next.copy(), q.copy(), u.copy(), mode)


def _active_rows(res):
    lam = res.row_impulses
    s = res.slack
    scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
    if res.active is not None and res.polished:
        active = res.active.copy()
    else:
        active = s * s * res.kappa < 1.0
    weak = (active & (lam <= LAMBDA_TOL * scale)) | (~active & (s <= SLACK_TOL))
    return active, weak


def _kkt_sensitivity(model, res, dG, de, db_dq, db_du):
    qp = res.qp
    x = res.dq
    nq = model.n_q
    active, weak = _active_rows(res)
    if np.any(weak):
        rows = np.flatnonzero(weak).tolist()
        raise DegenerateActiveSet(f"weakly active constraint rows {rows}: derivative is set-valued")
    idx = np.flatnonzero(active)
    lam = res.row_impulses[idx]
    Ga = qp.G[idx]
    k = idx.size
    K = np.zeros((nq + k, nq + k))
    K[:nq, :nq] = qp.Q
    K[:nq, nq:] = -Ga.T
    K[nq:, :nq] = Ga
    rhs = np.zeros((nq + k, nq + model.n_a))
    rhs[:nq, :nq] = db_dq - np.einsum("mij,m->ij", dG[idx], lam)
    rhs[:nq, nq:] = db_du
    rhs[nq:, :nq] = np.einsum("mij,i->mj", dG[idx], x) + de[idx]
    try:
        sol = np.linalg.solve(K, -rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, -rhs, rcond=None)[0]
    return sol[:nq]


def active_rows(res):
    """Jacobian rows of the constraints carrying nonzero impulse at an exact step."""
    active, weak = _active_rows(res)
    if np.any(weak):
        raise DegenerateActiveSet("weakly active constraint rows")
    return res.qp.G[active]


def explicit_B_planar(model, rows, h):
    """Closed-form input Jacobian from the active constraint rows.

    B_a = I - (h^2 K_a)^-1 Ja' P Ja,  B_u = -(eps M_u)^-1 Ju' P Ja,
    P = [Ju (eps M_u)^-1 Ju' + Ja (h^2 K_a)^-1 Ja']^-1.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float)).reshape(-1, model.n_q)
    n_u, n_a = model.n_u, model.n_a
    if rows.shape[0] == 0:
        return np.vstack([np.zeros((n_u, n_a)), np.eye(n_a)])
    if np.linalg.matrix_rank(rows) < rows.shape[0]:
        raise RankDeficient(f"{rows.shape[0]} active rows have rank {np.linalg.matrix_rank(rows)}")
    Ju, Ja = rows[:, :n_u], rows[:, n_u:]
    Ka_inv = np.diag(1.0 / (h * h * model.K_a))
    Mu_inv = np.linalg.inv(model.eps_reg * model.M_u) if n_u else np.zeros((0, 0))
    P = np.linalg.inv(Ju @ Mu_inv @ Ju.T + Ja @ Ka_inv @ Ja.T)
    B_a = np.eye(n_a) - Ka_inv @ Ja.T @ P @ Ja
    B_u = -Mu_inv @ Ju.T @ P @ Ja
    return np.vstack([B_u, B_a])


def check_kkt(res, tol_stat=1e-8):
    """Return (stationarity, min slack, min impulse, max complementarity)."""
    qp = res.qp
    stat = np.abs(qp.Q @ res.dq + qp.b - qp.G.T @ res.row_impulses).max(initial=0.0)
    s = qp.G @ res.dq + qp.e
    return (float(stat), float(s.min(initial=np.inf)), float(res.row_impulses.min(initial=np.inf)),
            float(np.abs(res.row_impulses * s).max(initial=0.0)))
