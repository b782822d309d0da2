"""Planar collision queries for smooth contact pairs.

Every body has a planar pose (x, y, theta).  Geometries are attached to a body
(index >= 0) or to the world (index -1).  Only pairs whose signed distance is a
smooth function of the poses are supported: disc-disc, disc-wall,
disc-capsule and disc-boxarray (a box represented by a ring of discs).

Normals point from body B into body A, so that
``witness_a - witness_b = phi * normal``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedPair

DISC = "disc"
WALL = "wall"
BOX_ARRAY = "box_array"
CAPSULE = "capsule"
KINDS = (DISC, WALL, BOX_ARRAY, CAPSULE)

WORLD = -1


def rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def perp(v):
    """Rotate vectors by +90 degrees (last axis holds xy)."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


@dataclass(frozen=True)
class CollisionGeometry:
    """A collision shape attached to one body.

    Fields that do not apply to a kind are ignored.  For ``box_array`` the
    local disc centers are derived at construction and stored in ``centers``.
    """
    kind: str
    body: int = WORLD
    radius: float = 0.0
    center: tuple = (0.0, 0.0)
    normal: tuple = (1.0, 0.0)
    p0: tuple = (0.0, 0.0)
    p1: tuple = (0.0, 0.0)
    half_extents: tuple = (0.0, 0.0)
    density: float = 8.0
    name: str = ""
    centers: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.kind == WALL:
            n = np.asarray(self.normal, dtype=float)
            norm = float(np.linalg.norm(n))
            if norm <= 0:
                raise ValueError("wall normal must be nonzero")
            object.__setattr__(self, "normal", tuple(n / norm))
            return
        if not self.radius > 0:
            raise ValueError(f"{self.kind} radius must be strictly positive")
        if self.kind == CAPSULE:
            if np.allclose(self.p0, self.p1):
                raise ValueError("capsule endpoints must differ")
        if self.kind == BOX_ARRAY:
            a, b = self.half_extents
            if not (a > 0 and b > 0):
                raise ValueError("box half extents must be strictly positive")
            if self.radius > min(a, b):
                raise ValueError("disc radius exceeds box half extent")
            if not self.density > 0:
                raise ValueError("disc density must be positive")
            object.__setattr__(self, "centers", _ring_centers(a, b, self.radius, self.density))

    @property
    def spacing(self):
        """Largest gap between adjacent ring discs (box arrays only)."""
        c = self.centers
        gaps = np.linalg.norm(np.roll(c, -1, axis=0) - c, axis=1)
        return float(gaps.max())


def _ring_centers(a, b, r, density):
    ia, ib = a - r, b - r
    pts = []
    # walk the inset rectangle counter-clockwise from the lower-left corner
    corners = [(-ia, -ib), (ia, -ib), (ia, ib), (-ia, ib)]
    edge_lengths = [2 * a, 2 * b, 2 * a, 2 * b]
    for k in range(4):
        s, e = np.array(corners[k]), np.array(corners[(k + 1) % 4])
        inset_len = float(np.linalg.norm(e - s))
        n = max(1, math.ceil(edge_lengths[k] * density - 1e-9))
        while inset_len / n > 2 * r:
            n += 1
        if inset_len == 0.0:
            n = 1
        for i in range(n):
            pts.append(s + (e - s) * i / n)
    pts = np.array(pts)
    # degenerate insets (r equal to a half extent) produce duplicate points
    _, idx = np.unique(np.round(pts, 12), axis=0, return_index=True)
    return pts[np.sort(idx)]


def disc(body, radius, center=(0.0, 0.0), name=""):
    return CollisionGeometry(DISC, body, radius=radius, center=tuple(center), name=name)


def wall(body, point, normal, name=""):
    """Half-plane through ``point``; free space lies on the ``normal`` side."""
    return CollisionGeometry(WALL, body, center=tuple(point), normal=tuple(normal), name=name)


def box_array(body, half_extents, radius=None, density=8.0, name=""):
    a, b = half_extents
    if radius is None:
        radius = 0.5 * min(a, b)
    return CollisionGeometry(BOX_ARRAY, body, radius=radius, half_extents=(a, b),
                             density=density, name=name)


def capsule(body, p0, p1, radius, name=""):
    return CollisionGeometry(CAPSULE, body, radius=radius, p0=tuple(p0), p1=tuple(p1), name=name)


@dataclass(frozen=True)
class ContactCandidate:
    """Closest-point data for one (sub-)pair.

    ``pair`` indexes the owning model's pair list (None for standalone
    queries); ``sub`` selects the disc of a box array (0 otherwise).
    """
    pair: object
    sub: int
    phi: float
    normal: np.ndarray
    witness_a: np.ndarray
    witness_b: np.ndarray


@dataclass(frozen=True)
class ContactFrame:
    J_n: np.ndarray
    J_t: np.ndarray
    candidate: ContactCandidate
    mu: float


def _pose(poses, body):
    if body == WORLD:
        return 0.0, 0.0, 0.0
    x, y, th = poses[body]
    return float(x), float(y), float(th)


def _to_world(poses, body, pts):
    x, y, th = _pose(poses, body)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return pts @ rot(th).T + np.array([x, y])


def _disc_vs_centers(ca, ra, cb, rb):
    """Disc A (center ca) against k discs B (centers cb, shape (k, 2))."""
    d = ca[None, :] - cb
    dist = np.linalg.norm(d, axis=1)
    safe = dist > 1e-12
    n = np.zeros_like(d)
    n[safe] = d[safe] / dist[safe, None]
    n[~safe] = (1.0, 0.0)
    phi = dist - ra - rb
    wa = ca[None, :] - ra * n
    wb = cb + rb * n
    return phi, n, wa, wb


def _disc_vs_wall(ca, ra, pw, nw):
    gap = float(nw @ (ca - pw))
    n = nw[None, :]
    phi = np.array([gap - ra])
    wa = ca[None, :] - ra * n
    wb = ca[None, :] - gap * n
    return phi, n, wa, wb


def _disc_vs_segment(ca, ra, s0, s1, rc):
    seg = s1 - s0
    t = float(np.clip((ca - s0) @ seg / (seg @ seg), 0.0, 1.0))
    closest = s0 + t * seg
    return _disc_vs_centers(ca, ra, closest[None, :], rc)


def _pair_arrays(ga, gb, poses):
    """Vectorized closest-point data with A a disc.  Returns (phi, n, wa, wb)."""
    ca = _to_world(poses, ga.body, ga.center)[0]
    if gb.kind == DISC:
        cb = _to_world(poses, gb.body, gb.center)
        return _disc_vs_centers(ca, ga.radius, cb, gb.radius)
    if gb.kind == WALL:
        pw = _to_world(poses, gb.body, gb.center)[0]
        nw = rot(_pose(poses, gb.body)[2]) @ np.asarray(gb.normal)
        return _disc_vs_wall(ca, ga.radius, pw, nw)
    if gb.kind == CAPSULE:
        s = _to_world(poses, gb.body, [gb.p0, gb.p1])
        return _disc_vs_segment(ca, ga.radius, s[0], s[1], gb.radius)
    if gb.kind == BOX_ARRAY:
        cb = _to_world(poses, gb.body, gb.centers)
        return _disc_vs_centers(ca, ga.radius, cb, gb.radius)
    raise UnsupportedPair(f"{ga.kind}-{gb.kind}")


def pair_arrays(ga, gb, poses):
    """Closest-point arrays for every sub-contact of a supported pair.

    Works for either argument order; the result always follows the
    (A, B) convention of the call.
    """
    if ga.kind == DISC and gb.kind in KINDS:
        return _pair_arrays(ga, gb, poses)
    if gb.kind == DISC and ga.kind in (WALL, CAPSULE, BOX_ARRAY):
        phi, n, wa, wb = _pair_arrays(gb, ga, poses)
        return phi, -n, wb, wa
    raise UnsupportedPair(f"unsupported geometry pair {ga.kind}-{gb.kind}")


def signed_distance_pair(geom_a, geom_b, poses):
    """Signed distance between two geometries.

    For a box array the closest ring disc is reported; ``sub`` names it.
    """
    phi, n, wa, wb = pair_arrays(geom_a, geom_b, poses)
    k = int(np.argmin(phi))
    return ContactCandidate(None, k, float(phi[k]), n[k].copy(), wa[k].copy(), wb[k].copy())


def point_jacobians(poses, pose_jac, body, pts):
    """d(world point)/dq for points rigidly attached to ``body``; shape (k, 2, nq)."""
    pts = np.atleast_2d(pts)
    nq = pose_jac.shape[-1]
    if body == WORLD:
        return np.zeros((len(pts), 2, nq))
    x, y, _ = _pose(poses, body)
    jb = pose_jac[body]
    lever = np.stack([-(pts[:, 1] - y), pts[:, 0] - x], axis=1)
    return jb[None, :2, :] + lever[:, :, None] * jb[None, 2, :]


@dataclass
class ContactSet:
    """Stacked contact data for a model at one configuration."""
    keys: list            # (pair index, sub index)
    phi: np.ndarray       # (k,)
    normal: np.ndarray    # (k, 2)
    witness_a: np.ndarray
    witness_b: np.ndarray
    J_n: np.ndarray       # (k, nq)
    J_t: np.ndarray       # (k, nq)
    mu: np.ndarray        # (k,)

    def __len__(self):
        return len(self.keys)

    def candidate(self, i):
        p, s = self.keys[i]
        return ContactCandidate(p, s, float(self.phi[i]), self.normal[i].copy(),
                                self.witness_a[i].copy(), self.witness_b[i].copy())

    def frame(self, i):
        return ContactFrame(self.J_n[i].copy(), self.J_t[i].copy(), self.candidate(i),
                            float(self.mu[i]))


def contact_set(model, q, keys=None, margin=None, sweep=()):
    """All contacts of ``model`` at ``q`` closer than the activation margin.

    Configurations in ``sweep`` (points along the intended motion) also
    activate contacts that come within the margin there; every contact is
    still evaluated at ``q``.  Passing ``keys`` evaluates exactly those
    (pair, sub) contacts regardless of distance, which keeps the row
    structure fixed under perturbation.
    """
    q = np.asarray(q, dtype=float)
    poses, pose_jac = model.kinematics.forward(q)
    swept = [model.kinematics.forward(np.asarray(v, dtype=float))[0] for v in sweep]
    margin = model.margin if margin is None else margin
    nq = q.shape[0]
    wanted = None
    if keys is not None:
        wanted = {}
        for p, s in keys:
            wanted.setdefault(p, []).append(s)
    out_keys, phis, ns, was, wbs, jns, jts, mus = [], [], [], [], [], [], [], []
    for p, pair in enumerate(model.pairs):
        if wanted is not None and p not in wanted:
            continue
        ga, gb = model.geometries[pair.a], model.geometries[pair.b]
        phi, n, wa, wb = pair_arrays(ga, gb, poses)
        if wanted is not None:
            idx = np.asarray(wanted[p], dtype=int)
        else:
            near = phi < margin
            for sp in swept:
                near |= pair_arrays(ga, gb, sp)[0] < margin
            idx = np.flatnonzero(near)
        if idx.size == 0:
            continue
        phi, n, wa, wb = phi[idx], n[idx], wa[idx], wb[idx]
        ja = point_jacobians(poses, pose_jac, ga.body, wa)
        jb = point_jacobians(poses, pose_jac, gb.body, wb)
        dj = ja - jb
        t = perp(n)
        jns.append(np.einsum("ki,kij->kj", n, dj))
        jts.append(np.einsum("ki,kij->kj", t, dj))
        out_keys.extend((p, int(s)) for s in idx)
        phis.append(phi)
        ns.append(n)
        was.append(wa)
        wbs.append(wb)
        mus.append(np.full(idx.size, pair.mu))
    if not out_keys:
        z2 = np.zeros((0, 2))
        return ContactSet([], np.zeros(0), z2, z2, z2, np.zeros((0, nq)), np.zeros((0, nq)),
                          np.zeros(0))
    return ContactSet(out_keys, np.concatenate(phis), np.concatenate(ns), np.concatenate(was),
                      np.concatenate(wbs), np.concatenate(jns), np.concatenate(jts),
                      np.concatenate(mus))


def contact_jacobian(model, q, candidate):
    """Normal and tangent Jacobian rows for one candidate of ``model`` at ``q``."""
    cs = contact_set(model, q, keys=[(candidate.pair, candidate.sub)])
    return ContactFrame(cs.J_n[0], cs.J_t[0], candidate, float(cs.mu[0]))


def min_signed_distance(model, q):
    """Smallest signed distance over every pair of the model (no margin)."""
    cs = contact_set(model, q, margin=np.inf)
    return float(cs.phi.min()) if len(cs) else np.inf


# ------------------------------------------------------------------ batches

def _to_world_batch(poses, body, pts):
    """Local points (k, 2) on ``body`` for N poses; returns (N, k, 2)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    N = poses.shape[0]
    if body == WORLD:
        return np.broadcast_to(pts, (N,) + pts.shape).copy()
    x, y, th = poses[:, body, 0], poses[:, body, 1], poses[:, body, 2]
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]
    px, py = pts[None, :, 0], pts[None, :, 1]
    return np.stack([c * px - s * py + x[:, None], s * px + c * py + y[:, None]], axis=-1)


def _centers_batch(ca, ra, cb, rb):
    d = ca[:, None, :] - cb
    dist = np.linalg.norm(d, axis=-1)
    safe = dist > 1e-12
    n = np.where(safe[..., None], d / np.where(safe, dist, 1.0)[..., None], np.array([1.0, 0.0]))
    return dist - ra - rb, n, ca[:, None, :] - ra * n, cb + rb * n


def _pair_batch(ga, gb, poses):
    ca = _to_world_batch(poses, ga.body, ga.center)[:, 0]
    if gb.kind in (DISC, BOX_ARRAY):
        pts = gb.center if gb.kind == DISC else gb.centers
        return _centers_batch(ca, ga.radius, _to_world_batch(poses, gb.body, pts), gb.radius)
    if gb.kind == WALL:
        pw = _to_world_batch(poses, gb.body, gb.center)[:, 0]
        nw = _to_world_batch(poses, gb.body, gb.normal)[:, 0]
        if gb.body != WORLD:
            nw = nw - poses[:, gb.body, :2]
        gap = np.einsum("ni,ni->n", nw, ca - pw)
        n = nw[:, None, :]
        return ((gap - ga.radius)[:, None], n, ca[:, None, :] - ga.radius * n,
                ca[:, None, :] - gap[:, None, None] * n)
    if gb.kind == CAPSULE:
        s = _to_world_batch(poses, gb.body, [gb.p0, gb.p1])
        seg = s[:, 1] - s[:, 0]
        t = np.clip(np.einsum("ni,ni->n", ca - s[:, 0], seg) / np.einsum("ni,ni->n", seg, seg), 0, 1)
        closest = s[:, 0] + t[:, None] * seg
        return _centers_batch(ca, ga.radius, closest[:, None, :], gb.radius)
    raise UnsupportedPair(f"{ga.kind}-{gb.kind}")


def _point_jacobians_batch(poses, pose_jac, body, pts):
    N, k = pts.shape[:2]
    if body == WORLD:
        return np.zeros((N, k, 2, pose_jac.shape[-1]))
    jb = pose_jac[:, body]
    rel = pts - poses[:, None, body, :2]
    lever = np.stack([-rel[..., 1], rel[..., 0]], axis=-1)
    return jb[:, None, :2, :] + lever[..., None] * jb[:, None, None, 2, :]


def contact_rows_batch(model, qs, margin=None, sweep=()):
    """Friction-cone rows for many configurations at once.

    Returns G (N, m, nq), offsets e (N, m) and the live mask.  Every
    sub-contact of every pair gets its rows; those beyond the activation
    margin at ``qs`` and at every (N, nq) array in ``sweep`` are made inert
    (zero row, unit offset).  Columns inactive in all samples are dropped,
    so m is the union of the active row sets.
    """
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    margin = model.margin if margin is None else margin
    poses, pose_jac = model.kinematics.forward_batch(qs)
    swept = [model.kinematics.forward_batch(np.atleast_2d(v))[0] for v in sweep]
    Gs, es, lives = [], [], []
    for pair in model.pairs:
        ga, gb = model.geometries[pair.a], model.geometries[pair.b]
        if ga.kind != DISC:
            ga, gb, flip = gb, ga, -1.0
        else:
            flip = 1.0
        if ga.kind != DISC:
            raise UnsupportedPair(f"unsupported geometry pair {ga.kind}-{gb.kind}")
        phi, n, wa, wb = _pair_batch(ga, gb, poses)
        live = phi < margin
        for sp in swept:
            live |= _pair_batch(ga, gb, sp)[0] < margin
        keep = np.flatnonzero(live.any(axis=0))
        if keep.size == 0:
            continue
        phi, n, wa, wb, live = phi[:, keep], n[:, keep], wa[:, keep], wb[:, keep], live[:, keep]
        dj = flip * (_point_jacobians_batch(poses, pose_jac, ga.body, wa)
                     - _point_jacobians_batch(poses, pose_jac, gb.body, wb))
        n = flip * n
        jn = np.einsum("nki,nkij->nkj", n, dj)
        if pair.mu > 0:
            jt = np.einsum("nki,nkij->nkj", perp(n), dj)
            G = np.stack([jn + pair.mu * jt, jn - pair.mu * jt], axis=2).reshape(len(qs), -1, qs.shape[1])
            e = np.repeat(phi, 2, axis=1)
            live = np.repeat(live, 2, axis=1)
        else:
            G, e = jn, phi
        Gs.append(np.where(live[..., None], G, 0.0))
        es.append(np.where(live, e, 1.0))
        lives.append(live)
    if not Gs:
        return np.zeros((len(qs), 0, qs.shape[1])), np.zeros((len(qs), 0)), np.zeros((len(qs), 0), bool)
    return np.concatenate(Gs, axis=1), np.concatenate(es, axis=1), np.concatenate(lives, axis=1)
