"""Smooth surrogates and their Monte-Carlo linearizations.

Generic estimators work on any function of a point x; ``smoothed_linear_model``
applies them to the contact dynamics over the joint (q, u) coordinates.
Evaluators used with ``vectorized=True`` take an (N, d) array and return (N,)
or (N, m) values (gradients: (N, d) or (N, m, d)).
"""
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import dynamics, seeding
from .errors import (DegenerateActiveSet, EvaluatorFailure, RankDeficient, SingularRegression,
                     SolverFailure)

FAMILIES = ("gaussian", "logistic", "heavy_tailed")
SCHEMES = ("analytic", "randomized-first", "randomized-zeroth")
MAX_FAILURE_FRACTION = 0.1


@dataclass(frozen=True)
class NoiseDistribution:
    """Zero-mean noise with independent coordinates.

    ``scale`` is the standard deviation (gaussian), the logistic scale s, or
    for ``heavy_tailed`` the parameter sigma of
    rho(w) = sqrt(4 sigma / (sigma w^2 + 4)^3), which is one-dimensional.
    """
    family: str
    scale: tuple

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        sc = tuple(float(s) for s in np.atleast_1d(self.scale))
        if not sc or any(not s > 0 for s in sc):
            raise ValueError("noise scales must be positive")
        if self.family == "heavy_tailed" and len(sc) != 1:
            raise ValueError("the heavy-tailed density is one-dimensional")
        object.__setattr__(self, "scale", sc)

    @property
    def dim(self):
        return len(self.scale)

    def _s(self):
        return np.asarray(self.scale)

    def transform(self, uniform_or_normal):
        """Map base draws to noise (normals for gaussian, uniforms otherwise)."""
        z = uniform_or_normal
        s = self._s()
        if self.family == "gaussian":
            return z * s
        if self.family == "logistic":
            return s * (np.log(z) - np.log1p(-z))
        v = 2.0 * z - 1.0
        return 2.0 * v / np.sqrt(s * (1.0 - v * v))

    def draw(self, rng, n):
        if self.family == "gaussian":
            return self.transform(rng.standard_normal((n, self.dim)))
        # open interval keeps the inverse CDFs finite
        z = rng.random((n, self.dim))
        z = np.clip(z, 1e-300, 1.0 - 2.0 ** -53)
        return self.transform(z)

    def sample(self, n, seed, *labels):
        return seeding.chunked(seed, n, self.draw, "noise", *labels)

    def density(self, w):
        w = np.atleast_2d(w)
        s = self._s()
        if self.family == "gaussian":
            d = np.exp(-0.5 * (w / s) ** 2) / (s * math.sqrt(2 * math.pi))
        elif self.family == "logistic":
            a = np.abs(w) / s
            d = np.exp(-a) / (s * (1.0 + np.exp(-a)) ** 2)
        else:
            d = np.sqrt(4 * s / (s * w * w + 4) ** 3)
        return d.prod(axis=1)

    def score(self, w):
        """S(w) = -grad rho / rho, shape (n, dim)."""
        w = np.atleast_2d(w)
        s = self._s()
        if self.family == "gaussian":
            return w / s ** 2
        if self.family == "logistic":
            return np.tanh(w / (2 * s)) / s
        return 3 * s * w / (s * w * w + 4)


@dataclass
class EstimatorReport:
    estimate: np.ndarray
    n: int
    variance: np.ndarray   # per-entry variance of one sample's contribution
    stderr: np.ndarray

    @staticmethod
    def from_samples(values):
        values = np.asarray(values, dtype=float)
        mean, var = welford(values)
        n = values.shape[0]
        return EstimatorReport(mean, n, var, np.sqrt(var / n))


def welford(values, block=seeding.CHUNK):
    """Mean and unbiased variance along axis 0, merged blockwise (Chan et al.).

    The block order is fixed, so the result does not depend on how the
    samples were produced.
    """
    values = np.asarray(values, dtype=float)
    n_total = values.shape[0]
    count = 0
    mean = np.zeros(values.shape[1:])
    m2 = np.zeros(values.shape[1:])
    for start in range(0, n_total, block):
        chunk = values[start:start + block]
        nb = chunk.shape[0]
        mb = chunk.mean(axis=0)
        m2b = ((chunk - mb) ** 2).sum(axis=0)
        delta = mb - mean
        tot = count + nb
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta ** 2 * count * nb / tot
        count = tot
    var = m2 / (count - 1) if count > 1 else np.zeros_like(m2)
    return mean, var


def _evaluate(f, X, vectorized):
    if vectorized:
        return np.asarray(f(X), dtype=float)
    out = []
    for i, x in enumerate(X):
        try:
            out.append(np.asarray(f(x), dtype=float))
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise EvaluatorFailure(i, exc) from exc
    return np.array(out)


def _as_point(x):
    return np.atleast_1d(np.asarray(x, dtype=float))


def surrogate_mean(f, x, rho, n, seed, vectorized=True):
    """Monte-Carlo estimate of E[f(x + w)]."""
    x = _as_point(x)
    W = rho.sample(n, seed)
    return EstimatorReport.from_samples(_evaluate(f, x + W, vectorized))


def gradient_first_order(grad_f, x, rho, n, seed, vectorized=True):
    """Average of the gradient at perturbed points."""
    x = _as_point(x)
    W = rho.sample(n, seed)
    return EstimatorReport.from_samples(_evaluate(grad_f, x + W, vectorized))


def _baseline_value(f, x, baseline, vectorized):
    if baseline in (None, "zero"):
        return 0.0
    if baseline in ("center", "zero-noise-evaluation"):
        v = _evaluate(f, x[None, :], vectorized)
        return v[0]
    return np.asarray(baseline, dtype=float)


def gradient_zeroth_order(f, x, rho, n, seed, baseline="zero", method="score", vectorized=True):
    """Zeroth-order gradient estimate from function values only.

    ``method="score"``: (1/N) sum (f(x + w_i) - b) S(w_i)^T.
    ``method="least_squares"`` (gaussian noise): the slope of the linear fit
    of f(x + w_i) on w_i with intercept; returns the slope, and
    ``report.intercept`` holds the fitted value at x.
    """
    x = _as_point(x)
    W = rho.sample(n, seed)
    F = _evaluate(f, x + W, vectorized)
    if method == "score":
        b = _baseline_value(f, x, baseline, vectorized)
        S = rho.score(W)
        Fc = F - b
        if Fc.ndim == 1:
            terms = Fc[:, None] * S
        else:
            terms = Fc[:, :, None] * S[:, None, :]
        return EstimatorReport.from_samples(terms)
    if method == "least_squares":
        if rho.family != "gaussian":
            raise ValueError("the least-squares form needs gaussian noise")
        slope, intercept, se_slope, se_int = least_squares_fit(W, F)
        rep = EstimatorReport(slope, n, se_slope ** 2 * n, se_slope)
        rep.intercept = intercept
        rep.intercept_stderr = se_int
        return rep
    raise ValueError(f"unknown method {method!r}")


def least_squares_fit(W, F):
    """Fit F ~ J W + mu; returns (J, mu, stderr(J), stderr(mu)).

    Standard errors use the heteroskedasticity-consistent sandwich form.
    """
    W = np.asarray(W, dtype=float)
    F = np.asarray(F, dtype=float)
    scalar = F.ndim == 1
    if scalar:
        F = F[:, None]
    n, d = W.shape
    X = np.hstack([W, np.ones((n, 1))])
    gram = X.T @ X
    if n < d + 1 or np.linalg.matrix_rank(gram) < d + 1:
        raise SingularRegression(f"sample Gram matrix is rank deficient (N={n}, dim={d})")
    ginv = np.linalg.inv(gram)
    coef = ginv @ (X.T @ F)          # (d + 1, m)
    resid = F - X @ coef
    se = np.zeros_like(coef)
    for j in range(F.shape[1]):
        meat = (X * resid[:, j:j + 1] ** 2).T @ X
        se[:, j] = np.sqrt(np.maximum(np.diag(ginv @ meat @ ginv), 0.0))
    J, mu = coef[:d].T, coef[d]
    seJ, semu = se[:d].T, se[d]
    if scalar:
        return J[0], mu[0], seJ[0], semu[0]
    return J, mu, seJ, semu


# ------------------------------------------------------------- dynamics

@dataclass
class SmoothingConfig:
    """How to produce a smoothed local model of the dynamics.

    Noise acts on (q, u): gaussian or logistic with scale ``sigma_u`` on the
    inputs and ``sigma_q`` (default 0.1 sigma_u) on the configuration.
    """
    scheme: str = "analytic"
    kappa: float = 100.0
    family: str = "gaussian"
    sigma_u: float = 0.05
    sigma_q: float = None
    n_samples: int = 100
    baseline: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown smoothing scheme {self.scheme!r}")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.family not in ("gaussian", "logistic"):
            raise ValueError("dynamics smoothing supports gaussian or logistic noise")
        if not self.sigma_u > 0 or (self.sigma_q is not None and not self.sigma_q > 0):
            raise ValueError("noise scales must be positive")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be at least 1")
        if self.baseline not in ("zero", "zero-noise-evaluation"):
            raise ValueError(f"unknown baseline policy {self.baseline!r}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown smoothing keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def noise(self, model):
        sq = 0.1 * self.sigma_u if self.sigma_q is None else self.sigma_q
        scale = [sq] * model.n_q + [self.sigma_u] * model.n_a
        return NoiseDistribution(self.family, scale)

    def with_(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return SmoothingConfig(**d)


def _tolerate(failures, n):
    if failures > MAX_FAILURE_FRACTION * n:
        raise SolverFailure(f"{failures} of {n} samples failed")


def smoothed_linear_model(model, q, u, h, config, labels=()):
    """(A_rho, B_rho, c_rho) at (q, u) under ``config``."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float).reshape(model.n_a)
    if config.scheme == "analytic":
        lm = dynamics.linearize(model, q, u, h, config.kappa)
        lm.mode = f"analytic({config.kappa:g})"
        return lm
    rho = config.noise(model)
    n = int(config.n_samples)
    W = rho.sample(n, config.seed, *labels)
    nq = model.n_q
    Qs = q + W[:, :nq]
    Us = u + W[:, nq:]
    if config.scheme == "randomized-first":
        As, Bs, cs = [], [], []
        failures = 0
        results = dynamics.step_batch_results(model, Qs, Us, h)
        for qi, ui, res in zip(Qs, Us, results):
            try:
                if not res.polished:
                    raise SolverFailure("exact step not verified")
                lm = dynamics.linearize(model, qi, ui, h, None, result=res)
            except (SolverFailure, DegenerateActiveSet, RankDeficient):
                failures += 1
                continue
            As.append(lm.A)
            Bs.append(lm.B)
            cs.append(lm.c)
        _tolerate(failures, n)
        ra, rb, rc = (EstimatorReport.from_samples(v) for v in (As, Bs, cs))
        return dynamics.LocalModel(ra.estimate, rb.estimate, rc.estimate, q.copy(), u.copy(),
                                   "randomized-first",
                                   stderr={"A": ra.stderr, "B": rb.stderr, "c": rc.stderr})
    # zeroth order: least-squares fit of next states on the (q, u) perturbations
    nxt = dynamics.step_batch(model, Qs, Us, h)
    J, _, seJ, _ = least_squares_fit(W, nxt)
    rc = EstimatorReport.from_samples(nxt)
    return dynamics.LocalModel(J[:, :nq], J[:, nq:], rc.estimate, q.copy(), u.copy(),
                               "randomized-zeroth",
                               stderr={"A": seJ[:, :nq], "B": seJ[:, nq:], "c": rc.stderr})
