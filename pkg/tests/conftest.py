import math

import numpy as np
import pytest

from cqdc import geometry, systems

PLANAR = ("planar_pushing", "planar_hand", "planar_hand_fixed_y")


def hand_grasp(model, angles=(math.pi + 0.3, -0.3), clearance=1e-3):
    """Fingertips placed around the puck at the given contact angles."""
    kin = model.kinematics
    p = model.params
    r = p["puck_radius"] + p["tip_radius"] + clearance
    cy = kin.fixed_y if kin.fixed_y is not None else 0.0
    qa = []
    for f, alpha in enumerate(angles):
        b = kin.bases[f]
        tgt = np.array([r * math.cos(alpha), cy + r * math.sin(alpha)])
        qa += list(systems.ik_2link(tgt, (kin.l1, kin.l2), (b[0], b[1], 0.0),
                                    "elbow-down" if f == 0 else "elbow-up"))
    return np.array([0.0] * model.n_u + qa)


def near_contact_state(model, rng, spread=0.02):
    """A random configuration close to contact (possibly slightly penetrating)."""
    name = model.name
    if name == "cart_wall":
        return np.array([rng.uniform(-0.05, 0.3)])
    if name == "block_wall":
        return np.array([rng.uniform(-0.3, 0.3)])
    if name == "cart_ball":
        r = model.params["ball_radius"]
        x = rng.uniform(-0.5, 0.5)
        return np.array([x, x + rng.uniform(-0.3, 0.3), r + rng.uniform(-0.01, 0.05)])
    q = np.zeros(model.n_q)
    if name == "planar_pushing":
        q[:3] = rng.uniform(-0.2, 0.2, 3)
    else:
        q[:model.n_u] = rng.uniform(-0.1, 0.1, model.n_u)
    for _ in range(64):
        try:
            q = systems.contact_sample(model, q, rng).q
            break
        except Exception:
            continue
    q[model.n_u:] += rng.normal(0.0, spread, model.n_a)
    return q


def feasible_state(model, rng, spread=0.02):
    """Near-contact configuration with no penetration."""
    for _ in range(200):
        q = near_contact_state(model, rng, spread)
        if geometry.min_signed_distance(model, q) >= 0:
            return q
    raise RuntimeError("no feasible state found")


@pytest.fixture(scope="session")
def models():
    return {name: systems.build_system(name) for name in systems.SYSTEM_NAMES}


# acceptance results, keyed by criterion label, printed after the run
ACCEPTANCE = {}


def record(label, ok, detail):
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[label] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    key = lambda s: (int("".join(c for c in s if c.isdigit())), s)
    for label in sorted(ACCEPTANCE, key=key):
        terminalreporter.write_line(ACCEPTANCE[label])
