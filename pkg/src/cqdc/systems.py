"""Bundled planar systems, scenario files, contact sampling and 2-link IK."""
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import geometry as geo
from .dynamics import ContactPair, SystemModel, step_exact
from .errors import ParseError, SampleFailure, UnknownSystem, Unreachable, ValidationError

CLEARANCE = 1e-3
MAX_ATTEMPTS = 32

DEFAULTS = {
    "cart_wall": dict(k_a=100.0, radius=0.05, eps_reg=1e-4, margin=10.0),
    "block_wall": dict(mass=1.0, radius=0.05, eps_reg=1e-4, margin=10.0),
    # the sliding bands of the cart-ball curve need a non-negligible object
    # inertia term, so this system uses the classical quasi-dynamic weight
    "cart_ball": dict(k_a=100.0, mass=1.0, ball_radius=0.1, mu=0.5, eps_reg=1.0, margin=10.0),
    "planar_pushing": dict(k_a=100.0, mass=1.0, half_extents=[0.25, 0.15], pusher_radius=0.05,
                           disc_density=8.0, mu=0.5, eps_reg=1e-4, margin=0.5),
    "planar_hand": dict(k_a=100.0, mass=1.0, puck_radius=0.25, links=[0.35, 0.25],
                        link_radius=0.02, tip_radius=0.04, base_offset=[0.55, -0.15],
                        mu=0.5, eps_reg=1e-4, margin=0.5, y=0.0),
}
DEFAULTS["planar_hand_fixed_y"] = dict(DEFAULTS["planar_hand"])
SYSTEM_NAMES = tuple(DEFAULTS)


# ---------------------------------------------------------------- kinematics

class PointBodies:
    """Bodies whose poses are slices of q: each entry maps (x, y, theta) to
    a q index, or to a constant when the index is None."""

    def __init__(self, n_q, layout):
        self.n_q = n_q
        self.layout = layout

    def forward(self, q):
        nb = len(self.layout)
        poses = np.zeros((nb, 3))
        jac = np.zeros((nb, 3, self.n_q))
        for b, entries in enumerate(self.layout):
            for k, ent in enumerate(entries):
                if isinstance(ent, int):
                    poses[b, k] = q[ent]
                    jac[b, k, ent] = 1.0
                else:
                    poses[b, k] = float(ent)
        return poses, jac

    def forward_batch(self, qs):
        N = len(qs)
        nb = len(self.layout)
        poses = np.zeros((N, nb, 3))
        jac = np.zeros((N, nb, 3, self.n_q))
        for b, entries in enumerate(self.layout):
            for k, ent in enumerate(entries):
                if isinstance(ent, int):
                    poses[:, b, k] = qs[:, ent]
                    jac[:, b, k, ent] = 1.0
                else:
                    poses[:, b, k] = float(ent)
        return poses, jac


class HandKinematics:
    """Puck plus two 2-link fingers with fixed bases.

    q = (x, [y], theta, a1, a2, b1, b2); bodies: puck, left link 1, left
    link 2, right link 1, right link 2.
    """

    def __init__(self, links, bases, fixed_y=None):
        self.l1, self.l2 = links
        self.bases = [np.asarray(b, dtype=float) for b in bases]
        self.fixed_y = fixed_y
        self.n_u = 2 if fixed_y is not None else 3
        self.n_q = self.n_u + 4

    def finger_points(self, angles, finger):
        """Elbow and tip positions of one finger."""
        a1, a2 = angles
        base = self.bases[finger]
        elbow = base + self.l1 * np.array([math.cos(a1), math.sin(a1)])
        tip = elbow + self.l2 * np.array([math.cos(a1 + a2), math.sin(a1 + a2)])
        return elbow, tip

    def forward(self, q):
        q = np.asarray(q, dtype=float)
        nq = self.n_q
        poses = np.zeros((5, 3))
        jac = np.zeros((5, 3, nq))
        if self.fixed_y is None:
            poses[0] = q[:3]
            jac[0, :, :3] = np.eye(3)
        else:
            poses[0] = (q[0], self.fixed_y, q[1])
            jac[0, 0, 0] = 1.0
            jac[0, 2, 1] = 1.0
        for f in range(2):
            i1 = self.n_u + 2 * f
            a1, a2 = q[i1], q[i1 + 1]
            base = self.bases[f]
            elbow, _ = self.finger_points((a1, a2), f)
            poses[1 + 2 * f] = (base[0], base[1], a1)
            jac[1 + 2 * f, 2, i1] = 1.0
            poses[2 + 2 * f] = (elbow[0], elbow[1], a1 + a2)
            jac[2 + 2 * f, 0, i1] = -self.l1 * math.sin(a1)
            jac[2 + 2 * f, 1, i1] = self.l1 * math.cos(a1)
            jac[2 + 2 * f, 2, i1] = 1.0
            jac[2 + 2 * f, 2, i1 + 1] = 1.0
        return poses, jac

    def forward_batch(self, qs):
        N, nq = len(qs), self.n_q
        poses = np.zeros((N, 5, 3))
        jac = np.zeros((N, 5, 3, nq))
        if self.fixed_y is None:
            poses[:, 0] = qs[:, :3]
            jac[:, 0, :, :3] = np.eye(3)
        else:
            poses[:, 0, 0], poses[:, 0, 1], poses[:, 0, 2] = qs[:, 0], self.fixed_y, qs[:, 1]
            jac[:, 0, 0, 0] = 1.0
            jac[:, 0, 2, 1] = 1.0
        for f in range(2):
            i1 = self.n_u + 2 * f
            a1, a2 = qs[:, i1], qs[:, i1 + 1]
            base = self.bases[f]
            c1, s1 = np.cos(a1), np.sin(a1)
            poses[:, 1 + 2 * f] = np.stack([np.full(N, base[0]), np.full(N, base[1]), a1], axis=1)
            jac[:, 1 + 2 * f, 2, i1] = 1.0
            poses[:, 2 + 2 * f] = np.stack([base[0] + self.l1 * c1, base[1] + self.l1 * s1, a1 + a2],
                                           axis=1)
            jac[:, 2 + 2 * f, 0, i1] = -self.l1 * s1
            jac[:, 2 + 2 * f, 1, i1] = self.l1 * c1
            jac[:, 2 + 2 * f, 2, i1] = 1.0
            jac[:, 2 + 2 * f, 2, i1 + 1] = 1.0
        return poses, jac


# ------------------------------------------------------------------ builders

def _merge(name, overrides):
    p = dict(DEFAULTS[name])
    for k, v in (overrides or {}).items():
        if k not in p:
            raise ValidationError("unknown system parameter", f"{name}.{k}")
        p[k] = v
    return p


def build_system(name, params=None, **overrides):
    """Construct a bundled system, applying parameter overrides."""
    if name not in DEFAULTS:
        raise UnknownSystem(f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}")
    merged = dict(params or {})
    merged.update(overrides)
    p = _merge(name, merged)
    return _BUILDERS[name](p)


def _cart_wall(p):
    r = p["radius"]
    geoms = (geo.disc(0, r, name="cart"), geo.wall(geo.WORLD, (-r, 0.0), (1.0, 0.0), name="wall"))
    return SystemModel("cart_wall", 0, 1, np.zeros((0, 0)), [p["k_a"]], [], [0.0], geoms,
                       (ContactPair(0, 1, 0.0),), PointBodies(1, [(0, 0.0, 0.0)]),
                       eps_reg=p["eps_reg"], margin=p["margin"],
                       q_lo=np.array([-10.0]), q_hi=np.array([10.0]), params=p)


def _block_wall(p):
    r = p["radius"]
    geoms = (geo.disc(0, r, name="block"), geo.wall(geo.WORLD, (-r, 0.0), (1.0, 0.0), name="wall"))
    return SystemModel("block_wall", 1, 0, np.array([[p["mass"]]]), [], [0.0], [], geoms,
                       (ContactPair(0, 1, 0.0),), PointBodies(1, [(0, 0.0, 0.0)]),
                       eps_reg=p["eps_reg"], margin=p["margin"],
                       q_lo=np.zeros(0), q_hi=np.zeros(0), params=p)


def _cart_ball(p):
    # q = (cart x, ball x, ball y); the cart's top face is the line y = 0
    geoms = (geo.disc(1, p["ball_radius"], name="ball"),
             geo.wall(0, (0.0, 0.0), (0.0, 1.0), name="cart_top"))
    kin = PointBodies(3, [(0, 0.0, 0.0), (1, 2, 0.0)])
    return SystemModel("cart_ball", 1, 2, np.array([[p["mass"]]]), [p["k_a"]] * 2, [0.0], [0.0, 0.0],
                       geoms, (ContactPair(0, 1, p["mu"]),), kin, eps_reg=p["eps_reg"],
                       margin=p["margin"], q_lo=np.array([-5.0, -5.0]), q_hi=np.array([5.0, 5.0]),
                       params=p)


def _planar_pushing(p):
    a, b = p["half_extents"]
    m = p["mass"]
    inertia = m * ((2 * a) ** 2 + (2 * b) ** 2) / 12.0
    geoms = (geo.disc(1, p["pusher_radius"], name="pusher"),
             geo.box_array(0, (a, b), density=p["disc_density"], name="box"))
    kin = PointBodies(5, [(0, 1, 2), (3, 4, 0.0)])
    return SystemModel("planar_pushing", 3, 2, np.diag([m, m, inertia]), [p["k_a"]] * 2,
                       [0.0] * 3, [0.0, 0.0], geoms, (ContactPair(0, 1, p["mu"]),), kin,
                       eps_reg=p["eps_reg"], margin=p["margin"],
                       q_lo=np.array([-2.0, -2.0]), q_hi=np.array([2.0, 2.0]),
                       angle_mask=np.array([False, False, True]), params=p)


def _hand(p, fixed_y):
    l1, l2 = p["links"]
    bx, by = p["base_offset"]
    r = p["puck_radius"]
    m = p["mass"]
    inertia = 0.5 * m * r * r
    kin = HandKinematics((l1, l2), [(-bx, by), (bx, by)], fixed_y=p["y"] if fixed_y else None)
    lr, tr = p["link_radius"], p["tip_radius"]
    geoms = [geo.disc(0, r, name="puck")]
    for f, side in enumerate(("left", "right")):
        b1, b2 = 1 + 2 * f, 2 + 2 * f
        geoms.append(geo.capsule(b1, (0.0, 0.0), (l1, 0.0), lr, name=f"{side}_link1"))
        geoms.append(geo.capsule(b2, (0.0, 0.0), (l2 - tr, 0.0), lr, name=f"{side}_link2"))
        geoms.append(geo.disc(b2, tr, center=(l2, 0.0), name=f"{side}_tip"))
    pairs = tuple(ContactPair(0, g, p["mu"]) for g in range(1, 7))
    if fixed_y:
        M = np.diag([m, inertia])
        name, n_u, mask = "planar_hand_fixed_y", 2, [False, True]
    else:
        M = np.diag([m, m, inertia])
        name, n_u, mask = "planar_hand", 3, [False, False, True]
    lim = np.array([math.pi] * 4)
    return SystemModel(name, n_u, 4, M, [p["k_a"]] * 4, [0.0] * n_u, [0.0] * 4, tuple(geoms), pairs,
                       kin, eps_reg=p["eps_reg"], margin=p["margin"], q_lo=-lim, q_hi=lim,
                       angle_mask=np.array(mask), params=p)


_BUILDERS = {
    "cart_wall": _cart_wall,
    "block_wall": _block_wall,
    "cart_ball": _cart_ball,
    "planar_pushing": _planar_pushing,
    "planar_hand": lambda p: _hand(p, False),
    "planar_hand_fixed_y": lambda p: _hand(p, True),
}


# ------------------------------------------------------------------------ IK

def ik_2link(target, links, base=(0.0, 0.0, 0.0), branch="elbow-down"):
    """Joint angles (relative to the base heading) placing the tip at ``target``."""
    l1, l2 = links
    bx, by = base[0], base[1]
    bth = base[2] if len(base) > 2 else 0.0
    d = np.asarray(target, dtype=float) - (bx, by)
    r = float(np.hypot(*d))
    tol = 1e-12
    if r > l1 + l2 + tol or r < abs(l1 - l2) - tol:
        raise Unreachable(f"target at distance {r:.6g} outside [{abs(l1 - l2):.6g}, {l1 + l2:.6g}]")
    c2 = np.clip((r * r - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
    t2 = math.acos(c2)
    if branch == "elbow-up":
        t2 = -t2
    elif branch != "elbow-down":
        raise ValueError(f"unknown branch {branch!r}")
    t1 = math.atan2(d[1], d[0]) - math.atan2(l2 * math.sin(t2), l1 + l2 * math.cos(t2)) - bth
    t1 = (t1 + math.pi) % (2 * math.pi) - math.pi
    return np.array([t1, t2])


def fk_2link(angles, links, base=(0.0, 0.0, 0.0)):
    l1, l2 = links
    bth = base[2] if len(base) > 2 else 0.0
    a1 = bth + angles[0]
    a12 = a1 + angles[1]
    return np.array([base[0] + l1 * math.cos(a1) + l2 * math.cos(a12),
                     base[1] + l1 * math.sin(a1) + l2 * math.sin(a12)])


# --------------------------------------------------------- contact sampling

@dataclass
class ContactSampleResult:
    q: np.ndarray
    provenance: str
    min_phi: float
    attempts: int = 1


def _settle(model, q, h):
    """One exact step commanding the current robot pose; object kept fixed."""
    res = step_exact(model, q, q[model.n_u:], h)
    out = np.array(q, dtype=float)
    out[model.n_u:] = res.q_next[model.n_u:]
    return out


def _finish(model, q_new, h, attempts):
    if geo.min_signed_distance(model, q_new) < 0:
        return None
    q_set = _settle(model, q_new, h)
    phi = geo.min_signed_distance(model, q_set)
    if phi < -1e-6 or phi > 0.1 * model.margin:
        return None
    return ContactSampleResult(q_set, "contact-sample", phi, attempts)


def _within_limits(model, q):
    qa = q[model.n_u:]
    lo = model.q_lo if model.q_lo is not None else -np.inf
    hi = model.q_hi if model.q_hi is not None else np.inf
    return bool(np.all(qa >= lo) and np.all(qa <= hi))


def contact_sample(model, q, rng, h=0.1, max_attempts=MAX_ATTEMPTS):
    """Re-place the robot in near-contact with the object, keeping q_u fixed."""
    q = np.asarray(q, dtype=float)
    sampler = _SAMPLERS.get(model.name)
    if sampler is None:
        raise SampleFailure(f"system {model.name!r} has no contact sampler")
    for attempt in range(1, max_attempts + 1):
        cand = sampler(model, q, rng)
        if cand is None or not _within_limits(model, cand):
            continue
        out = _finish(model, cand, h, attempt)
        if out is not None:
            out.q[:model.n_u] = q[:model.n_u]
            return out
    raise SampleFailure(f"no valid contact configuration after {max_attempts} attempts")


def _sample_cart_wall(model, q, rng):
    return np.array([CLEARANCE])


def _sample_cart_ball(model, q, rng):
    r = model.params["ball_radius"]
    return np.array([q[0], q[0] + rng.uniform(-0.5, 0.5), r + CLEARANCE])


def _snap_to_clearance(model, q, idx, direction):
    """Slide the robot coordinates ``idx`` along ``direction`` until the
    smallest signed distance equals the clearance."""
    for _ in range(20):
        phi = geo.min_signed_distance(model, q)
        if abs(phi - CLEARANCE) < 1e-9:
            break
        q[idx] -= (phi - CLEARANCE) * direction
    return q


def _sample_pushing(model, q, rng):
    a, b = model.params["half_extents"]
    rp = model.params["pusher_radius"]
    s = rng.uniform(0.0, 4 * (a + b))
    # perimeter walk counter-clockwise from the lower-left corner
    if s < 2 * a:
        local, n = np.array([-a + s, -b]), np.array([0.0, -1.0])
    elif s < 2 * a + 2 * b:
        local, n = np.array([a, -b + (s - 2 * a)]), np.array([1.0, 0.0])
    elif s < 4 * a + 2 * b:
        local, n = np.array([a - (s - 2 * a - 2 * b), b]), np.array([0.0, 1.0])
    else:
        local, n = np.array([-a, b - (s - 4 * a - 2 * b)]), np.array([-1.0, 0.0])
    R = geo.rot(q[2])
    n_w = R @ n
    p = q[:2] + R @ local + (rp + CLEARANCE) * n_w
    out = q.copy()
    out[3:5] = p
    return _snap_to_clearance(model, out, slice(3, 5), n_w)


def _sample_hand(model, q, rng):
    kin = model.kinematics
    n_u = model.n_u
    p = model.params
    r = p["puck_radius"] + p["tip_radius"] + CLEARANCE
    cx = q[0]
    cy = q[1] if n_u == 3 else kin.fixed_y
    out = q.copy()
    for f in range(2):
        base = kin.bases[f]
        # contact angles on the half of the puck facing this finger's base
        facing = math.atan2(base[1] - cy, base[0] - cx)
        alpha = facing + rng.uniform(-0.5 * math.pi, 0.5 * math.pi)
        target = np.array([cx + r * math.cos(alpha), cy + r * math.sin(alpha)])
        branch = "elbow-up" if rng.uniform() < 0.5 else "elbow-down"
        try:
            ang = ik_2link(target, (kin.l1, kin.l2), (base[0], base[1], 0.0), branch)
        except Unreachable:
            return None
        out[n_u + 2 * f:n_u + 2 * f + 2] = ang
    return out


_SAMPLERS = {
    "cart_wall": _sample_cart_wall,
    "cart_ball": _sample_cart_ball,
    "planar_pushing": _sample_pushing,
    "planar_hand": _sample_hand,
    "planar_hand_fixed_y": _sample_hand,
}


# ----------------------------------------------------------------- scenarios

SCENARIO_KEYS = ("system", "q_init", "q_goal", "workspace", "h", "smoothing", "impc", "rrt", "seed")
REQUIRED_KEYS = ("system", "q_init", "q_goal", "workspace", "h")


@dataclass
class Scenario:
    system: str
    params: dict
    model: SystemModel
    q_init: np.ndarray
    q_goal: np.ndarray
    workspace: np.ndarray    # (n_u, 2)
    h: float
    smoothing: dict = field(default_factory=dict)
    impc: dict = field(default_factory=dict)
    rrt: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return {
            "system": {"name": self.system, "params": dict(self.params)},
            "q_init": [float(v) for v in self.q_init],
            "q_goal": [float(v) for v in self.q_goal],
            "workspace": [[float(lo), float(hi)] for lo, hi in self.workspace],
            "h": float(self.h),
            "smoothing": dict(self.smoothing),
            "impc": dict(self.impc),
            "rrt": dict(self.rrt),
            "seed": int(self.seed),
        }


def serialize_scenario(scenario):
    return json.dumps(scenario.to_dict(), indent=2)


def _vector(doc, key, n):
    try:
        v = np.asarray(doc[key], dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{key} must be a numeric array", field=key) from exc
    if v.shape != (n,):
        raise ValidationError(key, f"expected {n} entries, got {v.size}")
    return v


def load_scenario(text):
    """Parse and validate a scenario document (JSON text or dict)."""
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno) from exc
    else:
        doc = text
    if not isinstance(doc, dict):
        raise ParseError("scenario must be a JSON object")
    unknown = sorted(set(doc) - set(SCENARIO_KEYS))
    if unknown:
        raise ValidationError("unknown key", ", ".join(unknown))
    for key in REQUIRED_KEYS:
        if key not in doc:
            raise ValidationError(key, "missing")
    sysdoc = doc["system"]
    if isinstance(sysdoc, str):
        sysdoc = {"name": sysdoc}
    if not isinstance(sysdoc, dict) or "name" not in sysdoc:
        raise ValidationError("system", "needs a name")
    extra = sorted(set(sysdoc) - {"name", "params"})
    if extra:
        raise ValidationError("unknown key", ", ".join(f"system.{k}" for k in extra))
    params = dict(sysdoc.get("params") or {})
    model = build_system(sysdoc["name"], params)
    h = doc["h"]
    if not isinstance(h, (int, float)) or not h > 0:
        raise ValidationError("h", "must be a positive number")
    q_init = _vector(doc, "q_init", model.n_q)
    q_goal = _vector(doc, "q_goal", model.n_q)
    try:
        ws = np.asarray(doc["workspace"], dtype=float).reshape(model.n_u, 2)
    except (TypeError, ValueError) as exc:
        raise ValidationError("workspace", f"expected {model.n_u} [lo, hi] pairs") from exc
    if np.any(ws[:, 0] >= ws[:, 1]):
        raise ValidationError("workspace", "empty interval")
    gu = q_goal[:model.n_u]
    if np.any(gu < ws[:, 0]) or np.any(gu > ws[:, 1]):
        raise ValidationError("q_goal", "unactuated goal outside workspace")
    if model.q_lo is not None and model.n_a:
        qa = q_init[model.n_u:]
        if np.any(qa < model.q_lo) or np.any(qa > model.q_hi):
            raise ValidationError("joint limits", "q_init outside joint limits")
    if geo.min_signed_distance(model, q_init) < -1e-6:
        raise ValidationError("initial penetration",
                              f"min signed distance {geo.min_signed_distance(model, q_init):.4g}")
    sections = {}
    for key in ("smoothing", "impc", "rrt"):
        sec = doc.get(key) or {}
        if not isinstance(sec, dict):
            raise ValidationError(key, "must be an object")
        sections[key] = dict(sec)
    _validate_sections(sections)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError("seed", "must be a nonnegative integer")
    return Scenario(sysdoc["name"], params, model, q_init, q_goal, ws, float(h),
                    sections["smoothing"], sections["impc"], sections["rrt"], seed)


def _validate_sections(sections):
    # local imports: these modules depend on this one
    from .impc import ImpcConfig
    from .rrt import RrtConfig
    from .smoothing import SmoothingConfig
    try:
        SmoothingConfig.from_dict(sections["smoothing"])
        ImpcConfig.from_dict(sections["impc"])
        RrtConfig.from_dict(sections["rrt"])
    except (TypeError, ValueError) as exc:
        raise ValidationError("config", str(exc)) from exc


def bundled_path(name):
    return resources.files("cqdc").joinpath("scenarios", f"{name}.scenario")


def resolve_scenario_path(path):
    """Accept a filesystem path or ``bundled/<name>[.scenario]``."""
    s = str(path)
    if s.startswith("bundled/") and not Path(s).exists():
        stem = s[len("bundled/"):]
        if stem.endswith(".scenario"):
            stem = stem[:-len(".scenario")]
        return bundled_path(stem)
    return Path(s)


def read_scenario(path):
    p = resolve_scenario_path(path)
    return load_scenario(p.read_text(encoding="utf-8"))
