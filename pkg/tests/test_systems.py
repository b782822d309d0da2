import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqdc import geometry as geo
from cqdc import systems
from cqdc.errors import ParseError, SampleFailure, UnknownSystem, Unreachable, ValidationError

from conftest import PLANAR

DOFS = {"planar_pushing": (3, 2), "planar_hand": (3, 4), "planar_hand_fixed_y": (2, 4),
        "cart_wall": (0, 1), "block_wall": (1, 0), "cart_ball": (1, 2)}


@pytest.mark.parametrize("name", systems.SYSTEM_NAMES)
def test_dof_tuples(name):
    m = systems.build_system(name)
    assert (m.n_u, m.n_a) == DOFS[name]
    assert m.n_q == m.n_u + m.n_a


def test_unknown_system_and_parameter():
    with pytest.raises(UnknownSystem):
        systems.build_system("allegro")
    with pytest.raises(ValidationError):
        systems.build_system("cart_wall", bogus=1.0)


def test_cart_wall_override():
    m = systems.build_system("cart_wall", k_a=1.0)
    assert (m.n_u, m.n_a) == (0, 1)
    np.testing.assert_allclose(m.K_a, [1.0])
    assert len(geo.contact_set(m, [0.3])) == 1


@pytest.mark.parametrize("name", systems.SYSTEM_NAMES)
def test_bundled_scenarios_load(name):
    sc = systems.read_scenario(f"bundled/{name}")
    assert sc.system == name
    assert geo.min_signed_distance(sc.model, sc.q_init) >= -1e-6


def _doc(name="planar_pushing"):
    return json.loads(systems.bundled_path(name).read_text())


def test_missing_goal():
    d = _doc()
    del d["q_goal"]
    with pytest.raises(ValidationError) as info:
        systems.load_scenario(d)
    assert info.value.invariant == "q_goal"


def test_initial_penetration():
    d = _doc("cart_wall")
    d["q_init"] = [-0.1]
    with pytest.raises(ValidationError) as info:
        systems.load_scenario(d)
    assert info.value.invariant == "initial penetration"


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(extra=1),
    lambda d: d["system"].update(colour="red") if isinstance(d["system"], dict) else d.update(system={"name": d["system"], "colour": 1}),
    lambda d: d.update(workspace=[[1, -1], [0, 1], [0, 1]]),
    lambda d: d.update(h=-0.1),
    lambda d: d.update(q_init=[0.0, 0.0]),
    lambda d: d.update(q_goal=[5.0, 0, 0, 0, 0]),
    lambda d: d.update(impc={"horizon": 0}),
    lambda d: d.update(rrt={"nope": 1}),
    lambda d: d.update(seed=-3),
])
def test_invalid_documents_rejected(mutate):
    d = _doc()
    mutate(d)
    with pytest.raises(ValidationError):
        systems.load_scenario(d)


def test_parse_error_has_line():
    with pytest.raises(ParseError) as info:
        systems.load_scenario('{\n  "system": "cart_wall",\n  oops\n}')
    assert info.value.line == 3
    with pytest.raises(ParseError):
        systems.load_scenario("[1, 2]")
    with pytest.raises(ParseError):
        systems.load_scenario(json.dumps({**_doc(), "q_init": "abc"}))


@pytest.mark.parametrize("name", systems.SYSTEM_NAMES)
def test_scenario_round_trip(name):
    sc = systems.read_scenario(f"bundled/{name}")
    again = systems.load_scenario(systems.serialize_scenario(sc))
    assert again.to_dict() == sc.to_dict()


# ------------------------------------------------------------ contact sampling

@pytest.mark.parametrize("name", ("cart_wall", "cart_ball") + PLANAR)
def test_contact_sample_postconditions(models, name):
    m = models[name]
    sc = systems.read_scenario(f"bundled/{name}")
    rng = np.random.default_rng(0)
    for _ in range(20):
        res = systems.contact_sample(m, sc.q_init, rng)
        np.testing.assert_array_equal(res.q[:m.n_u], sc.q_init[:m.n_u])
        phi = geo.min_signed_distance(m, res.q)
        assert -1e-6 <= phi <= 0.1 * m.margin
        assert res.min_phi == pytest.approx(phi, abs=1e-12)
        if m.q_lo is not None:
            assert np.all(res.q[m.n_u:] >= m.q_lo) and np.all(res.q[m.n_u:] <= m.q_hi)


def test_hand_fixed_y_sample_touches_puck(models):
    m = models["planar_hand_fixed_y"]
    r = m.params["puck_radius"]
    rng = np.random.default_rng(1)
    for q in ([0.0, 0.0], [0.2, 1.0], [-0.1, -2.0]):
        q = np.concatenate([q, np.zeros(4)])
        res = systems.contact_sample(m, q, rng)
        assert res.min_phi <= 0.05 * r


def test_pushing_samples_cover_every_sector(models):
    m = models["planar_pushing"]
    rng = np.random.default_rng(2)
    q = np.array([0.1, -0.2, 0.7, 0.0, 0.0])
    hits = np.zeros(8, dtype=int)
    R = geo.rot(q[2])
    for _ in range(500):
        res = systems.contact_sample(m, q, rng)
        local = R.T @ (res.q[3:5] - q[:2])
        ang = math.atan2(local[1], local[0]) % (2 * math.pi)
        hits[int(ang // (math.pi / 4)) % 8] += 1
    assert np.all(hits > 0)


def test_sampler_missing_raises(models):
    with pytest.raises(SampleFailure):
        systems.contact_sample(models["block_wall"], [0.0], np.random.default_rng(0))


# ------------------------------------------------------------------------ IK

def test_ik_fully_extended():
    np.testing.assert_allclose(systems.ik_2link((0.6, 0.0), (0.35, 0.25)), [0.0, 0.0], atol=1e-7)


def test_ik_unreachable():
    with pytest.raises(Unreachable):
        systems.ik_2link((0.7, 0.0), (0.35, 0.25))
    with pytest.raises(Unreachable):
        systems.ik_2link((0.05, 0.0), (0.35, 0.25))


@settings(max_examples=200, deadline=None)
@given(r=st.floats(0.1 + 1e-6, 0.6 - 1e-6), a=st.floats(-math.pi, math.pi),
       bx=st.floats(-1, 1), by=st.floats(-1, 1), bth=st.floats(-math.pi, math.pi),
       branch=st.sampled_from(["elbow-up", "elbow-down"]))
def test_ik_round_trip(r, a, bx, by, bth, branch):
    links = (0.35, 0.25)
    base = (bx, by, bth)
    tgt = np.array([bx + r * math.cos(a), by + r * math.sin(a)])
    ang = systems.ik_2link(tgt, links, base, branch)
    assert np.linalg.norm(systems.fk_2link(ang, links, base) - tgt) <= 1e-9
    assert (ang[1] >= 0) == (branch == "elbow-down") or abs(ang[1]) < 1e-12
