import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqdc import dynamics, seeding, smoothing as sm, systems
from cqdc.errors import EvaluatorFailure, SingularRegression

H = 0.1
N_BIG = 100_000


def logistic(s=1.0):
    return sm.NoiseDistribution("logistic", (s,))


def gaussian(s=1.0, dim=1):
    return sm.NoiseDistribution("gaussian", (s,) * dim)


def relu(X):
    return np.maximum(X[:, 0], 0.0)


def relu_grad(X):
    return (X > 0).astype(float)


def heaviside(X):
    return (X[:, 0] > 0).astype(float)


def within(rep, value, k=3.0):
    return np.all(np.abs(np.asarray(rep.estimate) - value) <= k * np.asarray(rep.stderr))


# ------------------------------------------------------------ closed forms

def test_surrogate_relu_logistic_is_softplus():
    rep = sm.surrogate_mean(relu, [0.0], logistic(), N_BIG, seed=1)
    assert within(rep, math.log(2.0))


def test_surrogate_of_constant_is_exact():
    for n in (1, 7, 5000):
        rep = sm.surrogate_mean(lambda X: np.full(len(X), 3.0), [0.4], gaussian(), n, seed=2)
        assert rep.estimate == 3.0


def test_surrogate_heaviside_symmetric_noise():
    for rho in (logistic(), gaussian(0.3)):
        rep = sm.surrogate_mean(heaviside, [0.0], rho, N_BIG, seed=3)
        assert within(rep, 0.5)


def test_first_order_relu_is_sigmoid():
    rep = sm.gradient_first_order(relu_grad, [0.0], logistic(), N_BIG, seed=4)
    assert within(rep, 0.5)


def test_first_order_linear_is_exact():
    a = np.array([1.5, -0.25])
    rep = sm.gradient_first_order(lambda X: np.tile(a, (len(X), 1)), [0.1, 0.2],
                                  gaussian(1.0, 2), 100, seed=5)
    np.testing.assert_array_equal(rep.estimate, a)


def test_first_order_heaviside_is_biased_to_zero():
    rep = sm.gradient_first_order(lambda X: np.zeros_like(X), [0.0], logistic(), 1000, seed=6)
    assert rep.estimate[0] == 0.0


def test_zeroth_order_heaviside_recovers_logistic_density():
    rep = sm.gradient_zeroth_order(heaviside, [0.0], logistic(), N_BIG, seed=7)
    assert within(rep, 0.25)


def test_zeroth_order_relu_logistic():
    rep = sm.gradient_zeroth_order(relu, [0.0], logistic(), N_BIG, seed=8)
    assert within(rep, 0.5)


def test_zeroth_order_least_squares_exact_on_linear_data():
    a = np.array([2.0, -1.0])
    f = lambda X: X @ a + 0.7
    for n in (3, 10, 200):
        rep = sm.gradient_zeroth_order(f, [0.3, -0.2], gaussian(1.0, 2), n, seed=9,
                                       method="least_squares")
        np.testing.assert_allclose(rep.estimate, a, atol=1e-10)
        assert rep.intercept == pytest.approx(f(np.array([[0.3, -0.2]]))[0], abs=1e-10)


def test_zeroth_order_score_linear_within_stderr():
    rep = sm.gradient_zeroth_order(lambda X: 1.5 * X[:, 0], [0.2], gaussian(), 20_000, seed=10,
                                   baseline="center")
    assert within(rep, 1.5)


def test_singular_regression():
    with pytest.raises(SingularRegression):
        sm.gradient_zeroth_order(lambda X: X[:, 0], [0.0, 0.0, 0.0], gaussian(1.0, 3), 3, seed=0,
                                 method="least_squares")
    with pytest.raises(SingularRegression):
        sm.least_squares_fit(np.ones((10, 2)), np.zeros(10))


def test_evaluator_failure_reports_index():
    calls = []

    def f(x):
        calls.append(x)
        if len(calls) == 4:
            raise ZeroDivisionError("boom")
        return float(x[0])

    with pytest.raises(EvaluatorFailure) as info:
        sm.surrogate_mean(f, [0.0], gaussian(), 10, seed=0, vectorized=False)
    assert "3" in str(info.value)


def test_cubic_regression_slope_matches_convolution():
    # E[(x + w)^3 - (x + w)] = x^3 + 3 x s^2 - x, slope 3 x^2 + 3 s^2 - 1
    x, s = 0.3, 0.5
    exact = 3 * x * x + 3 * s * s - 1
    rep = sm.gradient_zeroth_order(lambda X: X[:, 0] ** 3 - X[:, 0], [x], gaussian(s), N_BIG,
                                   seed=11, method="least_squares")
    assert abs(rep.estimate[0] - exact) <= 4 * rep.stderr[0]
    assert rep.intercept == pytest.approx(x ** 3 + 3 * x * s * s - x, abs=4 * rep.intercept_stderr)


# ------------------------------------------------------------ noise families

@pytest.mark.parametrize("family", sm.FAMILIES)
def test_noise_density_integrates_to_one_and_score(family):
    rho = sm.NoiseDistribution(family, (0.7,))
    w = np.linspace(-400, 400, 800_001)[:, None]
    d = rho.density(w)
    assert np.trapezoid(d, w[:, 0]) == pytest.approx(1.0, abs=5e-3)
    pts = np.array([[-1.3], [-0.2], [0.4], [2.0]])
    eps = 1e-6
    fd = -(np.log(rho.density(pts + eps)) - np.log(rho.density(pts - eps))) / (2 * eps)
    np.testing.assert_allclose(rho.score(pts)[:, 0], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("family", sm.FAMILIES)
def test_noise_samples_follow_density(family):
    rho = sm.NoiseDistribution(family, (0.7,))
    w = rho.sample(50_000, 0)[:, 0]
    for a, b in ((-1.0, 0.0), (0.0, 0.5), (0.5, 2.0)):
        grid = np.linspace(a, b, 2001)
        p = np.trapezoid(rho.density(grid[:, None]), grid)
        frac = np.mean((w > a) & (w <= b))
        assert abs(frac - p) <= 5 * math.sqrt(p * (1 - p) / len(w))


def test_noise_validation():
    with pytest.raises(ValueError):
        sm.NoiseDistribution("cauchy", (1.0,))
    with pytest.raises(ValueError):
        sm.NoiseDistribution("gaussian", (0.0,))
    with pytest.raises(ValueError):
        sm.NoiseDistribution("heavy_tailed", (1.0, 1.0))


# ------------------------------------------------------------ determinism

def test_seed_determinism_and_index_stability():
    rho = gaussian(0.3, 2)
    a = sm.surrogate_mean(lambda X: np.sin(X).sum(axis=1), [0.1, 0.2], rho, 9000, seed=42)
    b = sm.surrogate_mean(lambda X: np.sin(X).sum(axis=1), [0.1, 0.2], rho, 9000, seed=42)
    assert a.estimate == b.estimate and np.array_equal(a.stderr, b.stderr)
    big = rho.sample(9000, 5)
    np.testing.assert_array_equal(rho.sample(5000, 5), big[:5000])
    assert not np.array_equal(rho.sample(9000, 6), big)


def test_vectorized_and_scalar_evaluation_agree():
    f = lambda X: np.cos(X).sum(axis=-1)
    rho = gaussian(0.5, 2)
    a = sm.surrogate_mean(f, [0.0, 1.0], rho, 500, seed=3)
    b = sm.surrogate_mean(f, [0.0, 1.0], rho, 500, seed=3, vectorized=False)
    np.testing.assert_allclose(a.estimate, b.estimate, rtol=0, atol=1e-15)


def test_labelled_streams_are_independent_of_draw_order():
    x1 = seeding.stream(1, "a").random(3)
    seeding.stream(1, "b").random(1000)
    np.testing.assert_array_equal(seeding.stream(1, "a").random(3), x1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=60),
       st.integers(1, 9))
def test_welford_matches_two_pass(values, block):
    v = np.array(values)
    mean, var = sm.welford(v, block=block)
    assert mean == pytest.approx(v.mean(), abs=1e-9 * (1 + np.abs(v).max()))
    assert var == pytest.approx(v.var(ddof=1), rel=1e-7, abs=1e-7 * (1 + v.var()))


def test_baseline_invariance():
    f = lambda X: np.maximum(X[:, 0], 0.0) + 2.0
    rho = logistic()
    r0 = sm.gradient_zeroth_order(f, [0.3], rho, N_BIG, seed=12, baseline="zero")
    r1 = sm.gradient_zeroth_order(f, [0.3], rho, N_BIG, seed=13, baseline="center")
    pooled = math.hypot(r0.stderr[0], r1.stderr[0])
    assert abs(r0.estimate[0] - r1.estimate[0]) <= 3 * pooled
    # the baseline only changes the variance
    assert r1.stderr[0] < r0.stderr[0]


# ------------------------------------------------------------ dynamics

def test_analytic_scheme_is_barrier_linearization(models):
    m = models["planar_pushing"]
    q = np.array([0.0, 0.0, 0.1, -0.31, 0.02])
    u = np.array([-0.25, 0.03])
    cfg = sm.SmoothingConfig(scheme="analytic", kappa=300.0)
    a = sm.smoothed_linear_model(m, q, u, H, cfg)
    b = dynamics.linearize(m, q, u, H, 300.0)
    for key in ("A", "B", "c"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))


def test_block_wall_force_field_pushes_off():
    m = systems.build_system("block_wall")
    cfg = sm.SmoothingConfig(scheme="randomized-first", sigma_u=0.1, sigma_q=0.1, n_samples=2000)
    lm = sm.smoothed_linear_model(m, [0.0], np.zeros(0), H, cfg)
    assert lm.c[0] > 0.0
    assert lm.c[0] > 5 * lm.stderr["c"][0]


def test_block_wall_surrogate_dominates_projection():
    m = systems.build_system("block_wall")
    f = lambda X: dynamics.step_batch(m, X, np.zeros((len(X), 0)), H)[:, 0]
    rho = gaussian(0.1)
    for q in (-0.3, -0.1, 0.0, 0.05, 0.2):
        rep = sm.surrogate_mean(f, [q], rho, 4000, seed=14)
        assert rep.estimate >= max(q, 0.0) - 3 * rep.stderr
    at0 = sm.surrogate_mean(f, [0.0], rho, 4000, seed=15)
    assert at0.estimate > 10 * at0.stderr


def test_cart_ball_first_and_zeroth_order_agree():
    m = systems.build_system("cart_ball")
    r = m.params["ball_radius"]
    q = np.array([0.0, 0.0, r])
    u = np.array([0.05, r - 0.05])
    kw = dict(sigma_u=0.05, n_samples=10_000, seed=3)
    rf = sm.smoothed_linear_model(m, q, u, H, sm.SmoothingConfig(scheme="randomized-first", **kw))
    rz = sm.smoothed_linear_model(m, q, u, H, sm.SmoothingConfig(scheme="randomized-zeroth", **kw))
    pooled = np.hypot(rf.stderr["B"], rz.stderr["B"])
    assert np.all(np.abs(rf.B - rz.B) <= 5 * pooled + 1e-9)


def test_randomized_models_are_deterministic(models):
    m = models["planar_pushing"]
    q = np.array([0.0, 0.0, 0.0, -0.31, 0.0])
    u = np.array([-0.2, 0.0])
    for scheme in ("randomized-first", "randomized-zeroth"):
        cfg = sm.SmoothingConfig(scheme=scheme, sigma_u=0.05, n_samples=64, seed=7)
        a = sm.smoothed_linear_model(m, q, u, H, cfg, labels=("t", 1))
        b = sm.smoothed_linear_model(m, q, u, H, cfg, labels=("t", 1))
        np.testing.assert_array_equal(a.B, b.B)
        np.testing.assert_array_equal(a.c, b.c)


def test_smoothing_config_validation():
    with pytest.raises(ValueError):
        sm.SmoothingConfig(scheme="bogus")
    with pytest.raises(ValueError):
        sm.SmoothingConfig(kappa=0.0)
    with pytest.raises(ValueError):
        sm.SmoothingConfig.from_dict({"kapa": 1.0})
    cfg = sm.SmoothingConfig.from_dict({"scheme": "randomized-zeroth", "sigma_u": 0.2})
    assert sm.SmoothingConfig.from_dict(cfg.to_dict()) == cfg
