"""Sampling-based planning through contact with a reachability-aware metric."""
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import dynamics, seeding
from .errors import (DegenerateActiveSet, DegenerateDirection, RefinementFailure, SampleFailure,
                     SolverFailure)
from .smoothing import SmoothingConfig, smoothed_linear_model
from .geometry import contact_set, min_signed_distance
from .systems import CLEARANCE, contact_sample

PROVENANCES = ("root", "extend", "contact-sample")
DEGENERATE_NORM = 1e-8
EXACT_FALLBACK_KAPPA = 1e12


@dataclass
class RrtConfig:
    """Planner settings.

    ``goal_tol`` is a scalar or per-coordinate tolerance on q_u (angles
    compared by shortest wrapped difference).  ``global_weights`` weights
    the Euclidean metric of the global-metric ablation.  ``smoothing`` is a
    SmoothingConfig mapping used for node models.  With ``stop_at_goal``
    false the tree keeps growing to the iteration cap after the goal is
    first reached (diagnostic runs); the path ends at the first goal node.
    """
    max_iterations: int = 1000
    step_size: float = 0.1
    gamma: float = 1e-6
    goal_bias: float = 0.1
    contact_prob: float = 0.3
    goal_tol: object = 0.05
    eta: float = 1.0
    n_mc: int = 2000
    smoothing: dict = field(default_factory=dict)
    global_weights: list = None
    exact_gradients: bool = False
    contact_sampling: bool = True
    global_metric: bool = False
    stop_at_goal: bool = True
    seed: int = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        for name in ("goal_bias", "contact_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if int(self.max_iterations) < 0 or int(self.n_mc) < 1:
            raise ValueError("max_iterations must be >= 0 and n_mc >= 1")
        if np.any(np.asarray(self.goal_tol, dtype=float) <= 0):
            raise ValueError("goal_tol must be positive")
        SmoothingConfig.from_dict(self.smoothing)

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown rrt keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def smoothing_config(self):
        return SmoothingConfig.from_dict(self.smoothing)


@dataclass
class TreeNode:
    q: np.ndarray
    model: dynamics.LocalModel
    parent: int = None
    u: np.ndarray = None
    provenance: str = "root"
    iteration: int = 0


@dataclass
class PlanOutput:
    tree: list
    success: bool
    path: list
    min_dist: list            # per iteration, nonincreasing
    packing: list             # per iteration packing ratio
    iterations: int
    failures: dict = field(default_factory=dict)
    goal_index: int = None


# ------------------------------------------------------------------ metric

def wrap_difference(delta, angle_mask):
    """Shortest signed difference on angle coordinates, plain elsewhere."""
    delta = np.array(delta, dtype=float)
    if angle_mask is not None and np.any(angle_mask):
        m = np.asarray(angle_mask, dtype=bool)
        delta[..., m] = (delta[..., m] + math.pi) % (2 * math.pi) - math.pi
    return delta


def _unactuated(model_local, n_u):
    return model_local.B[:n_u], model_local.c[:n_u]


def metric_factor(B_u, gamma):
    """Cholesky factor of B_u B_u^T + gamma I."""
    n_u = B_u.shape[0]
    return np.linalg.cholesky(B_u @ B_u.T + gamma * np.eye(n_u))


def _mahalanobis(L, mu, Q, angle_mask):
    d = wrap_difference(np.atleast_2d(Q) - mu, angle_mask)
    # forward substitution against the lower factor, no explicit inverse
    z = np.linalg.solve(L, d.T)
    return 0.5 * np.einsum("ij,ij->j", z, z)


def mahalanobis_distance(node, q_query, gamma, n_u=None, angle_mask=None):
    """0.5 (q_u - mu_u)^T (B_u B_u^T + gamma I)^-1 (q_u - mu_u) for one node."""
    lm = node.model if isinstance(node, TreeNode) else node
    n_u = lm.B.shape[0] - lm.B.shape[1] if n_u is None else n_u
    B_u, mu = _unactuated(lm, n_u)
    q_u = np.asarray(q_query, dtype=float).reshape(-1)[:n_u]
    L = metric_factor(B_u, gamma)
    return float(_mahalanobis(L, mu, q_u, angle_mask)[0])


class _MetricCache:
    """Per-node inverse Cholesky factors and means for batched distance queries."""

    def __init__(self, n_u, gamma, angle_mask, weights=None, capacity=64):
        self.n_u = n_u
        self.gamma = gamma
        self.mask = angle_mask
        self.size = 0
        self.Linv = np.zeros((capacity, n_u, n_u))
        self.mu = np.zeros((capacity, n_u))
        self.q_u = np.zeros((capacity, n_u))
        self.weights = np.ones(n_u) if weights is None else np.asarray(weights, dtype=float)

    def add(self, node):
        if self.size == len(self.mu):
            grow = len(self.mu)
            self.Linv = np.concatenate([self.Linv, np.zeros_like(self.Linv[:grow])])
            self.mu = np.concatenate([self.mu, np.zeros_like(self.mu[:grow])])
            self.q_u = np.concatenate([self.q_u, np.zeros_like(self.q_u[:grow])])
        B_u, mu = _unactuated(node.model, self.n_u)
        L = metric_factor(B_u, self.gamma)
        k = self.size
        self.Linv[k] = np.linalg.solve(L, np.eye(self.n_u))
        self.mu[k] = mu
        self.q_u[k] = node.q[:self.n_u]
        self.size += 1

    def distances(self, Q, start=0, stop=None):
        """Metric from nodes [start, stop) to every query: (n_nodes, n_queries)."""
        stop = self.size if stop is None else stop
        Q = np.atleast_2d(Q)[:, :self.n_u]
        D = wrap_difference(Q[None, :, :] - self.mu[start:stop, None, :], self.mask)
        Z = np.einsum("kij,kqj->kqi", self.Linv[start:stop], D)
        return 0.5 * np.einsum("kqi,kqi->kq", Z, Z)

    def euclidean(self, q):
        d = wrap_difference(self.q_u[:self.size] - np.asarray(q)[:self.n_u], self.mask)
        return np.sqrt(((d * d) * self.weights).sum(axis=1))


def nearest(tree, q_subgoal, gamma, n_u=None, angle_mask=None):
    """Index of the node minimizing the metric; ties go to the lowest index."""
    n_u = tree[0].model.B.shape[0] - tree[0].model.B.shape[1] if n_u is None else n_u
    cache = _MetricCache(n_u, gamma, angle_mask)
    for node in tree:
        cache.add(node)
    d = cache.distances(np.asarray(q_subgoal, dtype=float)[None])[:, 0]
    return int(np.argmin(d))


# ------------------------------------------------------------------ pieces

def node_model(model, q, h, smoothing, exact=False, labels=()):
    """Local model at the nominal input u = q_a."""
    u = q[model.n_u:]
    if exact:
        try:
            return dynamics.linearize(model, q, u, h, None)
        except DegenerateActiveSet:
            lm = dynamics.linearize(model, q, u, h, EXACT_FALLBACK_KAPPA)
            lm.mode = "exact"
            return lm
    return smoothed_linear_model(model, q, u, h, smoothing, labels=labels)


def extend_input(node, q_subgoal, step_size, n_u, angle_mask=None, rng=None):
    """Command u = q_a + step * du/|du| with du the least-squares projection.

    Raises DegenerateDirection when the projection vanishes and no rng is
    given; with an rng the direction is drawn uniformly on the sphere.
    """
    B_u, c_u = _unactuated(node.model, n_u)
    target = wrap_difference(np.asarray(q_subgoal, dtype=float)[:n_u] - c_u, angle_mask)
    du = np.linalg.lstsq(B_u, target, rcond=None)[0]
    nrm = float(np.linalg.norm(du))
    if nrm <= DEGENERATE_NORM:
        if rng is None:
            raise DegenerateDirection(f"projected input norm {nrm:.3g}")
        du = rng.standard_normal(B_u.shape[1])
        nrm = float(np.linalg.norm(du))
    return node.q[n_u:] + step_size * du / nrm


def extend(model, node, q_subgoal, step_size, h, smoothing, rng=None, exact=False, labels=()):
    """One exact step from ``node`` toward the subgoal; returns the child TreeNode."""
    u = extend_input(node, q_subgoal, step_size, model.n_u, model.angle_mask, rng)
    q_new = dynamics.step_exact(model, node.q, u, h).q_next
    lm = node_model(model, q_new, h, smoothing, exact, labels)
    return TreeNode(q_new, lm, None, u, "extend")


def goal_reached(q, q_goal, tol, n_u, angle_mask):
    d = wrap_difference(np.asarray(q)[:n_u] - np.asarray(q_goal)[:n_u], angle_mask)
    return bool(np.all(np.abs(d) <= np.broadcast_to(np.asarray(tol, dtype=float), (n_u,))))


def goal_distance(q, q_goal, n_u, angle_mask):
    d = wrap_difference(np.asarray(q)[:n_u] - np.asarray(q_goal)[:n_u], angle_mask)
    return float(np.linalg.norm(d))


def mc_samples(workspace, n, seed):
    ws = np.asarray(workspace, dtype=float)
    U = seeding.chunked(seed, n, lambda rng, k: rng.random((k, ws.shape[0])), "packing")
    return ws[:, 0] + U * (ws[:, 1] - ws[:, 0])


def packing_ratio(tree, workspace, eta, n_mc, rng_or_seed, gamma=1e-6, n_u=None, angle_mask=None):
    """Fraction of uniform workspace samples within metric ``eta`` of some node."""
    if eta <= 0:
        return 0.0
    if np.isinf(eta):
        return 1.0
    n_u = np.asarray(workspace).shape[0] if n_u is None else n_u
    if isinstance(rng_or_seed, np.random.Generator):
        ws = np.asarray(workspace, dtype=float)
        Q = ws[:, 0] + rng_or_seed.random((int(n_mc), n_u)) * (ws[:, 1] - ws[:, 0])
    else:
        Q = mc_samples(workspace, int(n_mc), rng_or_seed)
    cache = _MetricCache(n_u, gamma, angle_mask)
    for node in tree:
        cache.add(node)
    best = np.full(len(Q), np.inf)
    for start in range(0, len(tree), 256):
        best = np.minimum(best, cache.distances(Q, start, min(start + 256, len(tree))).min(axis=0))
    return float(np.mean(best <= eta))


# ------------------------------------------------------------------ planner

def rrt_plan(model, q_init, q_goal, workspace, h, config, seed=0):
    """Grow a tree from ``q_init`` until the goal tolerance is met or the cap."""
    n_u = model.n_u
    mask = model.angle_mask
    smoothing = config.smoothing_config()
    exact = bool(config.exact_gradients)
    seed = config.seed if config.seed is not None else seed
    rng = seeding.stream(seed, "rrt")
    ws = np.asarray(workspace, dtype=float)
    q_init = np.asarray(q_init, dtype=float)
    root = TreeNode(q_init.copy(), node_model(model, q_init, h, smoothing, exact, (seed, "node", 0)))
    tree = [root]
    cache = _MetricCache(n_u, config.gamma, mask, config.global_weights)
    cache.add(root)
    Qmc = mc_samples(ws, int(config.n_mc), seed)
    best_mc = cache.distances(Qmc).min(axis=0)
    dmin = goal_distance(q_init, q_goal, n_u, mask)
    min_dist, packing = [], []
    failures = {"extend": 0, "contact-sample": 0, "degenerate": 0}
    if goal_reached(q_init, q_goal, config.goal_tol, n_u, mask):
        return PlanOutput(tree, True, [0], [], [], 0, failures, 0)
    success, goal_index, it = False, None, 0
    for it in range(1, int(config.max_iterations) + 1):
        if rng.random() < config.goal_bias:
            sub = np.asarray(q_goal, dtype=float)[:n_u].copy()
        else:
            sub = ws[:, 0] + rng.random(n_u) * (ws[:, 1] - ws[:, 0])
        if config.global_metric:
            k = int(np.argmin(cache.euclidean(sub)))
        else:
            k = int(np.argmin(cache.distances(sub[None])[:, 0]))
        parent = tree[k]
        child = None
        labels = (seed, "node", it)
        try:
            if config.contact_sampling and rng.random() < config.contact_prob:
                res = contact_sample(model, parent.q, rng, h)
                lm = node_model(model, res.q, h, smoothing, exact, labels)
                child = TreeNode(res.q, lm, k, None, "contact-sample", it)
            else:
                u = _extend_with_fallback(parent, sub, config.step_size, n_u, mask, rng, failures)
                q_new = dynamics.step_exact(model, parent.q, u, h).q_next
                lm = node_model(model, q_new, h, smoothing, exact, labels)
                child = TreeNode(q_new, lm, k, u, "extend", it)
        except SampleFailure:
            failures["contact-sample"] += 1
        except (SolverFailure, DegenerateActiveSet, np.linalg.LinAlgError):
            failures["extend"] += 1
        if child is not None:
            tree.append(child)
            cache.add(child)
            best_mc = np.minimum(best_mc, cache.distances(Qmc, len(tree) - 1)[0])
            dmin = min(dmin, goal_distance(child.q, q_goal, n_u, mask))
        min_dist.append(dmin)
        packing.append(float(np.mean(best_mc <= config.eta)))
        if not success and child is not None and \
                goal_reached(child.q, q_goal, config.goal_tol, n_u, mask):
            success, goal_index = True, len(tree) - 1
            if config.stop_at_goal:
                break
    path = trace_path(tree, goal_index) if success else []
    return PlanOutput(tree, success, path, min_dist, packing, it, failures, goal_index)


def _extend_with_fallback(parent, sub, step, n_u, mask, rng, failures):
    try:
        return extend_input(parent, sub, step, n_u, mask, None)
    except DegenerateDirection:
        failures["degenerate"] += 1
        return extend_input(parent, sub, step, n_u, mask, rng)


def trace_path(tree, index):
    path = []
    while index is not None:
        path.append(index)
        index = tree[index].parent
    return path[::-1]


# ------------------------------------------------------------------ refinement

@dataclass
class Segment:
    kind: str                 # "contact" or "free"
    states: np.ndarray        # (n + 1, n_q)
    inputs: np.ndarray        # (n, n_a)
    h: float
    refined: bool = False
    warning: str = None


def split_path(tree, path, n_u):
    """Contact-rich segments of a path as lists of node indices.

    Consecutive contact-sample nodes collapse to the last one and segments
    whose q_u never changes are dropped.
    """
    segments = []
    current = [path[0]]
    for idx in path[1:]:
        node = tree[idx]
        if node.provenance == "contact-sample":
            segments.append(current)
            current = [idx]
        else:
            current.append(idx)
    segments.append(current)
    out = []
    for seg in segments:
        if len(seg) < 2:
            continue
        qs = np.array([tree[i].q[:n_u] for i in seg])
        moving = np.flatnonzero(np.any(np.abs(np.diff(qs, axis=0)) > 0, axis=1))
        if moving.size == 0:
            continue
        out.append(seg[:moving[-1] + 2])
    return out


def _free_path_ok(model, q_from, qa_to, n_check=20, tol=1e-6):
    """Straight q_a motion never penetrates deeper than ``tol`` (endpoints may touch)."""
    for s in np.linspace(0.0, 1.0, n_check + 1):
        q = np.array(q_from, dtype=float)
        q[model.n_u:] = (1 - s) * q_from[model.n_u:] + s * qa_to
        if min_signed_distance(model, q) < -tol:
            return False
    return True


def _free_rrt(model, q_from, qa_to, rng, step=0.3, iters=3000):
    """Robot-only bidirectional RRT (connect variant) with the object frozen.

    Returns a list of q_a waypoints from q_from's robot part to ``qa_to``.
    """
    n_u = model.n_u
    lo = model.q_lo if model.q_lo is not None else q_from[n_u:] - 1.0
    hi = model.q_hi if model.q_hi is not None else q_from[n_u:] + 1.0
    q = np.array(q_from, dtype=float)

    def free(a, b):
        q[n_u:] = a
        return _free_path_ok(model, q, b, 5)

    trees = [([np.array(q_from[n_u:], dtype=float)], [None]),
             ([np.array(qa_to, dtype=float)], [None])]

    def grow(tree, target):
        nodes, parents = tree
        k = int(np.argmin(np.linalg.norm(np.array(nodes) - target, axis=1)))
        d = target - nodes[k]
        dn = np.linalg.norm(d)
        new = target.copy() if dn <= step else nodes[k] + step * d / dn
        if not free(nodes[k], new):
            return None
        nodes.append(new)
        parents.append(k)
        return len(nodes) - 1, dn <= step

    def branch(tree, j):
        nodes, parents = tree
        out = []
        while j is not None:
            out.append(nodes[j])
            j = parents[j]
        return out

    for it in range(iters):
        a, b = trees[it % 2], trees[1 - it % 2]
        got = grow(a, lo + rng.random(lo.size) * (hi - lo))
        if got is None:
            continue
        target = a[0][got[0]]
        while True:
            step_b = grow(b, target)
            if step_b is None:
                break
            if step_b[1]:
                pa, pb = branch(a, got[0]), branch(b, step_b[0])
                path = pa[::-1] + pb[1:] if it % 2 == 0 else pb[::-1] + pa[1:]
                return path
    raise RefinementFailure("no collision-free robot path")


def _regrasp(model, q, rng, h, tol=1e-6, tries=20):
    """Keep the planned grasp on a shifted object: minimum-norm q_a corrections
    lift penetrating contacts to the sampling clearance with the object fixed.
    Resamples a grasp only when that does not converge."""
    n_u = model.n_u
    q = np.array(q, dtype=float)
    for _ in range(tries):
        cs = contact_set(model, q, margin=CLEARANCE)
        low = cs.phi < CLEARANCE - tol
        if not np.any(cs.phi < -tol):
            return q
        J = cs.J_n[low][:, n_u:]
        q[n_u:] += np.linalg.lstsq(J, CLEARANCE - cs.phi[low], rcond=None)[0]
    if min_signed_distance(model, q) >= -tol:
        return q
    try:
        return contact_sample(model, q, rng, h).q
    except SampleFailure:
        return q


def refine_path(model, plan, h, impc_config, smoothing=None, seed=0, goal=None):
    """Re-optimize the contact-rich segments of a successful plan at h / 4.

    Each segment keeps its first state; its inputs are upsampled four times
    and passed to iMPC tracking the segment's own states.  Segments are
    joined by collision-free robot motions.  A segment whose optimization
    fails keeps its original states and inputs with a warning.
    """
    from .impc import ImpcConfig, impc_run, rollout
    if not plan.success:
        raise RefinementFailure("plan was not successful")
    tree = plan.tree
    n_u = model.n_u
    rng = seeding.stream(seed, "refine")
    h_fine = h / 4.0
    out = []
    prev_end = None
    for seg in split_path(tree, plan.path, n_u):
        q_start = tree[seg[0]].q
        if prev_end is not None:
            if np.any(prev_end[:n_u] != q_start[:n_u]):
                q_start = q_start.copy()
                q_start[:n_u] = prev_end[:n_u]
                # the refined object pose differs, so the recorded grasp may penetrate
                q_start = _regrasp(model, q_start, rng, h)
            try:
                if _free_path_ok(model, prev_end, q_start[n_u:]):
                    way = [prev_end[n_u:], q_start[n_u:]]
                else:
                    way = _free_rrt(model, prev_end, q_start[n_u:], rng)
                states = []
                for qa in way:
                    q = np.array(prev_end, dtype=float)
                    q[n_u:] = qa
                    states.append(q)
                out.append(Segment("free", np.array(states), np.array(way[1:]), 0.0))
            except RefinementFailure as exc:
                out.append(Segment("free", np.array([prev_end, q_start]),
                                   q_start[None, n_u:], 0.0, warning=str(exc)))
        us = np.array([tree[i].u for i in seg[1:]])
        U0 = np.repeat(us, 4, axis=0)
        refs_coarse = np.array([tree[i].q for i in seg])
        refs = np.vstack([refs_coarse[0]] + [
            np.linspace(refs_coarse[t], refs_coarse[t + 1], 5)[1:] for t in range(len(seg) - 1)])
        if goal is not None:
            refs[-1, :n_u] = refs_coarse[-1, :n_u]
        cfg = ImpcConfig.from_dict({**impc_config.to_dict(), "horizon": len(U0)})
        try:
            res = impc_run(model, q_start, U0, h_fine, cfg, smoothing, references=refs)
            X = rollout(model, q_start, res.inputs, h_fine)
            out.append(Segment("contact", X, res.inputs, h_fine, refined=True))
        except (SolverFailure, DegenerateActiveSet, np.linalg.LinAlgError) as exc:
            X = rollout(model, q_start, us, h)
            out.append(Segment("contact", X, us, h, warning=f"refinement failed: {exc}"))
        prev_end = out[-1].states[-1]
    return out
