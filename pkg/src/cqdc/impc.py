"""Iterative MPC over locally affine models of the contact dynamics."""
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import dynamics, solver
from .errors import (DegenerateActiveSet, Infeasible, LengthMismatch, SolverFailure)
from .smoothing import smoothed_linear_model

PROX = 1e-6
KKT_TOL = 1e-8


@dataclass
class ImpcConfig:
    """Horizon, diagonal weights, trust regions and the smoothing schedule.

    Weights are per-coordinate diagonals shared across time steps; ``None``
    means ones for states and 1e-2 for inputs.
    """
    horizon: int = 10
    q_weights: list = None
    r_weights: list = None
    qT_weights: list = None
    trust_u: float = 0.2
    trust_x: float = 1.0
    anneal_kappa: float = 5.0
    anneal_sigma: float = 0.7
    max_outer: int = 20
    tol: float = 1e-3

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")
        for name in ("q_weights", "r_weights", "qT_weights"):
            w = getattr(self, name)
            if w is not None and np.any(np.asarray(w, dtype=float) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if not (self.trust_u > 0 and self.trust_x > 0):
            raise ValueError("trust radii must be positive")
        if not self.anneal_kappa > 1 or not 0 < self.anneal_sigma <= 1:
            raise ValueError("anneal factors: kappa factor > 1, sigma factor in (0, 1]")
        if int(self.max_outer) < 0:
            raise ValueError("max_outer must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown impc keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def weights(self, n_q, n_a):
        Qd = np.ones(n_q) if self.q_weights is None else np.broadcast_to(
            np.asarray(self.q_weights, dtype=float), (n_q,))
        Rd = np.full(n_a, 1e-2) if self.r_weights is None else np.broadcast_to(
            np.asarray(self.r_weights, dtype=float), (n_a,))
        QT = Qd if self.qT_weights is None else np.broadcast_to(
            np.asarray(self.qT_weights, dtype=float), (n_q,))
        return np.diag(Qd), np.diag(Rd), np.diag(QT)


@dataclass
class TrajectoryResult:
    inputs: np.ndarray           # (T, n_a)
    states: np.ndarray           # (T + 1, n_q), exact rollout of ``inputs``
    cost_history: list           # entry 0 is the initial guess
    timings: list                # seconds per outer iteration
    best_iteration: int
    schedule: list = field(default_factory=list)   # smoothing parameter per outer iteration

    @property
    def cost(self):
        return self.cost_history[self.best_iteration]


def rollout(model, x0, inputs, h):
    """States x_0 .. x_T under the exact dynamics."""
    x = np.asarray(x0, dtype=float).copy()
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_a)
    states = [x]
    for t, u in enumerate(inputs):
        try:
            x = dynamics.step_exact(model, x, u, h).q_next
        except SolverFailure as exc:
            raise SolverFailure(f"rollout step {t}: {exc}", getattr(exc, "residual", None)) from exc
        states.append(x)
    return np.array(states)


def trajectory_cost(states, inputs, references, weights):
    """||x_T - x_T^d||^2_QT + sum_t ||x_t - x_t^d||^2_Q + ||u_t||^2_R.

    ``weights`` is (Q, R, Q_T) with matrices or diagonals.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    U = np.asarray(inputs, dtype=float)
    U = U.reshape(len(U), -1) if U.size else U.reshape(0, 0)
    R_ = np.atleast_2d(np.asarray(references, dtype=float))
    if len(X) != len(U) + 1 or len(R_) != len(X):
        raise LengthMismatch(f"{len(X)} states, {len(U)} inputs, {len(R_)} references")
    Q, R, QT = (np.atleast_2d(np.diag(w) if np.ndim(w) == 1 else w) for w in weights)
    D = X - R_
    cost = float(D[-1] @ QT @ D[-1])
    for t in range(len(U)):
        cost += float(D[t] @ Q @ D[t]) + float(U[t] @ R @ U[t])
    return cost


def _condense(models, x_start):
    """States as affine maps of the inputs: x_{t} = S_t dU + s_t for t = 0..H."""
    H = len(models)
    n_q = x_start.size
    n_a = models[0].B.shape[1]
    S = np.zeros((H + 1, n_q, H * n_a))
    s = np.zeros((H + 1, n_q))
    s[0] = x_start
    for t, lm in enumerate(models):
        S[t + 1] = lm.A @ S[t]
        S[t + 1][:, t * n_a:(t + 1) * n_a] += lm.B
        s[t + 1] = lm.A @ (s[t] - lm.q_nominal) + lm.c
    return S, s


def mpc_qp(models, x_start, references, weights, trust_u, trust_x=None):
    """Optimal inputs over the remaining horizon of ``models``.

    Dynamics x_{t+1} = A_t (x_t - q_nominal) + B_t (u_t - u_nominal) + c_t
    around each model's nominal point, x at the first step fixed to ``x_start``, box
    trust regions |u_t - u_nominal| <= trust_u and |x_t - q_nominal| <=
    trust_x for the intermediate states.  Returns (inputs (H, n_a),
    predicted states (H + 1, n_q)).  Raises Infeasible when the box
    constraints admit no strictly feasible point.
    """
    x_start = np.asarray(x_start, dtype=float)
    H = len(models)
    n_q = x_start.size
    n_a = models[0].B.shape[1]
    Q, R, QT = (np.atleast_2d(np.diag(w) if np.ndim(w) == 1 else w) for w in weights)
    refs = np.atleast_2d(np.asarray(references, dtype=float))
    if len(refs) != H + 1:
        raise LengthMismatch(f"{H + 1} states need as many references, got {len(refs)}")
    u_nom = np.concatenate([lm.u_nominal for lm in models])
    S, s = _condense(models, x_start)
    # cost in dU = U - u_nom
    n = H * n_a
    Hm = np.zeros((n, n))
    g = np.zeros(n)
    for t in range(1, H + 1):
        W = QT if t == H else Q
        r = s[t] - refs[t]
        Hm += S[t].T @ W @ S[t]
        g += S[t].T @ W @ r
    Rbig = np.kron(np.eye(H), R)
    Hm += Rbig
    g += Rbig @ u_nom
    Hm = Hm + Hm.T
    g = 2.0 * g
    # proximal term keeps the QP strictly convex when inputs do not enter the cost
    Hm += PROX * max(1.0, float(np.abs(np.diag(Hm)).max())) * np.eye(n)
    rows = [np.eye(n), -np.eye(n)]
    offs = [np.full(n, trust_u), np.full(n, trust_u)]
    if trust_x is not None:
        for t in range(1, H):
            dev = s[t] - models[t].q_nominal
            rows += [-S[t], S[t]]
            offs += [trust_x - dev, trust_x + dev]
    G = np.vstack(rows)
    e = np.concatenate(offs)
    scale = max(1.0, float(np.abs(Hm).max()))
    Hs, gs = Hm / scale, g / scale
    sol = solver.solve_qp(Hs, gs, G, e, target=0.5 * trust_u)
    dU = sol.x[0]
    if not sol.polished[0]:
        lam = sol.lam[0]
        slack = G @ dU + e
        kkt = max(np.abs(Hs @ dU + gs - G.T @ lam).max(), np.abs(lam * slack).max(), -slack.min())
        if not kkt <= KKT_TOL:
            raise SolverFailure("MPC QP did not reach a verified optimum", float(kkt))
    U = (u_nom + dU).reshape(H, n_a)
    X = np.einsum("tij,j->ti", S, dU) + s
    return U, X


def _linearize_all(model, states, inputs, h, smoothing, labels):
    models = []
    for t, (x, u) in enumerate(zip(states[:-1], inputs)):
        if smoothing is None:
            try:
                lm = dynamics.linearize(model, x, u, h, None)
            except DegenerateActiveSet:
                # one-sided limit: the barrier derivative at a very large weight
                lm = dynamics.linearize(model, x, u, h, 1e12)
                lm.mode = "exact"
        else:
            lm = smoothed_linear_model(model, x, u, h, smoothing, labels=labels + (t,))
        models.append(lm)
    return models


def _anneal(smoothing, config, k):
    if smoothing is None:
        return None, None
    if smoothing.scheme == "analytic":
        kap = smoothing.kappa * config.anneal_kappa ** k
        return smoothing.with_(kappa=kap), kap
    sig = smoothing.sigma_u * config.anneal_sigma ** k
    sq = None if smoothing.sigma_q is None else smoothing.sigma_q * config.anneal_sigma ** k
    return smoothing.with_(sigma_u=sig, sigma_q=sq), sig


def impc_run(model, x0, inputs, h, config, smoothing=None, references=None, goal=None):
    """Outer relinearization loop around inner MPC solves; ``smoothing=None`` uses exact gradients.

    ``references`` is (T + 1, n_q); alternatively ``goal`` gives a constant
    reference.  Every outer iteration relinearizes along the current
    trajectory, re-solves the MPC from each step j and applies the first
    input through the exact dynamics.  Returns the best trajectory seen.
    """
    T = int(config.horizon)
    x0 = np.asarray(x0, dtype=float)
    U = np.array(inputs, dtype=float).reshape(-1, model.n_a)
    if len(U) != T:
        raise LengthMismatch(f"horizon {T} but {len(U)} initial inputs")
    if references is None:
        if goal is None:
            raise ValueError("need references or goal")
        references = np.repeat(np.asarray(goal, dtype=float)[None], T + 1, axis=0)
    refs = np.asarray(references, dtype=float)
    weights = config.weights(model.n_q, model.n_a)
    X = rollout(model, x0, U, h)
    cost = trajectory_cost(X, U, refs, weights)
    history, timings, schedule = [cost], [], []
    best = (cost, U.copy(), X.copy(), 0)
    for k in range(int(config.max_outer)):
        t0 = time.perf_counter()
        sm, param = _anneal(smoothing, config, k)
        schedule.append(param)
        try:
            models = _linearize_all(model, X, U, h, sm, ("impc", k))
        except SolverFailure as exc:
            raise SolverFailure(f"outer {k}: {exc}") from exc
        Xn = X.copy()
        Un = U.copy()
        for j in range(T):
            try:
                try:
                    Uj, _ = mpc_qp(models[j:], Xn[j], refs[j:], weights, config.trust_u, config.trust_x)
                except Infeasible:
                    Uj, _ = mpc_qp(models[j:], Xn[j], refs[j:], weights, config.trust_u, None)
            except SolverFailure as exc:
                raise SolverFailure(f"outer {k}, inner {j}: {exc}") from exc
            Un[j] = Uj[0]
            try:
                Xn[j + 1] = dynamics.step_exact(model, Xn[j], Un[j], h).q_next
            except SolverFailure as exc:
                raise SolverFailure(f"outer {k}, inner {j}: {exc}") from exc
        new_cost = trajectory_cost(Xn, Un, refs, weights)
        history.append(new_cost)
        timings.append(time.perf_counter() - t0)
        if new_cost < best[0]:
            best = (new_cost, Un.copy(), Xn.copy(), k + 1)
        decrease = cost - new_cost
        X, U, cost = Xn, Un, new_cost
        if abs(decrease) <= config.tol * max(abs(history[-2]), 1e-12):
            break
    return TrajectoryResult(best[1], best[2], history, timings, best[3], schedule)
