"""Coefficient sets for slow-fast McKean-Vlasov systems.

A model supplies the slow drift ``b(x, mu, y)``, slow diffusion
``sigma(x, mu)``, fast drift ``f(x, mu, y)`` and fast diffusion
``g(x, mu, y)``.  All callables are vectorised over a leading particle axis:

    x: (P, n)   y: (P, m)   mu: EmpiricalMeasure on R^n

    b -> (P, n)   sigma -> (P, n, d1)   f -> (P, m)   g -> (P, m, d2)

Optional derivative slots feed the limiting fluctuation equation:

    bbar(x, mu)              -> (P, n)          averaged drift
    dx_bbar(x, mu)           -> (P, n, n)
    dmu_bbar(x, mu, z)       -> (P, n, n)       Lions derivative evaluated at z (P, n)
    dmu_bbar_dir(x, mu, v)   -> (P, n)          sum_j w_j dmu_bbar(x, mu)(p_j) v_j
    dx_sigma(x, mu)          -> (P, n, d1, n)
    dmu_sigma(x, mu, z)      -> (P, n, d1, n)
    dmu_sigma_dir(x, mu, v)  -> (P, n, d1)

The ``*_dir`` slots are the Lions derivative contracted against a
perturbation cloud ``v`` aligned with ``mu.points``; they let the particle
scheme evaluate mean-field terms in O(N) instead of O(N^2).

Smoothness of the Lions derivatives is *not* machine checked; the two
built-in models are constructed to satisfy it.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ModelError, PreconditionError
from .measure import EmpiricalMeasure
from .rng import PROBE, NoiseStream


@dataclass(frozen=True)
class CoefficientSet:
    dims: tuple  # (n, m, d1, d2)
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    bbar: Optional[Callable] = None
    dx_bbar: Optional[Callable] = None
    dmu_bbar: Optional[Callable] = None
    dmu_bbar_dir: Optional[Callable] = None
    dx_sigma: Optional[Callable] = None
    dmu_sigma: Optional[Callable] = None
    dmu_sigma_dir: Optional[Callable] = None
    has_analytic_oracle: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.dims[0]

    @property
    def m(self):
        return self.dims[1]

    @property
    def d1(self):
        return self.dims[2]

    @property
    def d2(self):
        return self.dims[3]


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{what} returned a non-finite value")
    return arr


# ---------------------------------------------------------------- linear model


@dataclass(frozen=True)
class LinearModelParams:
    """b = a1 x + a2 <mu> + a3 y,  sigma = sigma0,  f = -y + c1 x + c2 <mu>,  g = g0."""

    a1: float = -1.0
    a2: float = 0.5
    a3: float = 1.0
    c1: float = 0.5
    c2: float = 0.25
    sigma0: float = 0.3
    g0: float = 1.0


class LinearModel:
    """Callables of the scalar linear model; a plain class so it pickles."""

    def __init__(self, p: LinearModelParams):
        self.p = p

    def b(self, x, mu, y):
        p = self.p
        return p.a1 * x + p.a2 * mu.mean() + p.a3 * y

    def sigma(self, x, mu):
        return np.full((x.shape[0], 1, 1), self.p.sigma0)

    def f(self, x, mu, y):
        p = self.p
        return -y + p.c1 * x + p.c2 * mu.mean()

    def g(self, x, mu, y):
        return np.full((x.shape[0], 1, 1), self.p.g0)

    def bbar(self, x, mu):
        p = self.p
        return (p.a1 + p.a3 * p.c1) * x + (p.a2 + p.a3 * p.c2) * mu.mean()

    def dx_bbar(self, x, mu):
        p = self.p
        return np.full((x.shape[0], 1, 1), p.a1 + p.a3 * p.c1)

    def dmu_bbar(self, x, mu, z):
        p = self.p
        return np.full((x.shape[0], 1, 1), p.a2 + p.a3 * p.c2)

    def dmu_bbar_dir(self, x, mu, v):
        p = self.p
        return np.broadcast_to((p.a2 + p.a3 * p.c2) * (mu.weights @ v), x.shape).copy()

    def dx_sigma(self, x, mu):
        return np.zeros((x.shape[0], 1, 1, 1))

    def dmu_sigma(self, x, mu, z):
        return np.zeros((x.shape[0], 1, 1, 1))

    def dmu_sigma_dir(self, x, mu, v):
        return np.zeros((x.shape[0], 1, 1))


def linear_model(params=None, **overrides):
    """Scalar linear model with every derivative slot filled analytically.

    ``dx_bbar = a1 + a3 c1`` and ``dmu_bbar = a2 + a3 c2``; sigma is constant.
    """
    if params is None:
        params = LinearModelParams(**overrides)
    elif overrides:
        params = LinearModelParams(**{**params.__dict__, **overrides})
    lm = LinearModel(params)
    return CoefficientSet(
        dims=(1, 1, 1, 1),
        b=lm.b,
        sigma=lm.sigma,
        f=lm.f,
        g=lm.g,
        bbar=lm.bbar,
        dx_bbar=lm.dx_bbar,
        dmu_bbar=lm.dmu_bbar,
        dmu_bbar_dir=lm.dmu_bbar_dir,
        dx_sigma=lm.dx_sigma,
        dmu_sigma=lm.dmu_sigma,
        dmu_sigma_dir=lm.dmu_sigma_dir,
        has_analytic_oracle=True,
        name="linear",
        params=dict(params.__dict__),
    )


def oracle_bbar(params, x, mean):
    return (params.a1 + params.a3 * params.c1) * x + (params.a2 + params.a3 * params.c2) * mean


def oracle_frozen_invariant(params, x, mean):
    """Mean and variance of the stationary OU law of the frozen fast equation."""
    return params.c1 * x + params.c2 * mean, params.g0**2 / 2.0


def oracle_phi(params, x, mean, y):
    """Centered Poisson solution; the OU generator maps it to -(b - bbar)."""
    return params.a3 * (y - params.c1 * x - params.c2 * mean)


def oracle_theta(params):
    return abs(params.a3 * params.g0)


def oracle_clt_variance(params, t):
    """Var Z_t for the linear limiting equation, Z_0 = 0."""
    lam = params.a1 + params.a3 * params.c1
    theta2 = oracle_theta(params) ** 2
    if abs(lam) < 1e-8:
        # e^{2 lam t} - 1 = 2 lam t (1 + lam t + 2/3 (lam t)^2 + ...)
        u = lam * t
        return theta2 * t * (1.0 + u + 2.0 * u * u / 3.0)
    return theta2 * np.expm1(2.0 * lam * t) / (2.0 * lam)


# ----------------------------------------------------------- convolution model


@dataclass(frozen=True)
class ConvolutionModelParams:
    """Coefficients built from F(x, mu, y) = int F0(x + z, y) mu(dz) with trigonometric F0.

    b = -x + kb int sin(x+z) mu(dz) + a3 tanh(y)
    sigma = s0 + s1 int cos(x+z) mu(dz)
    f = -y + kf int sin(x+z) mu(dz)
    g = g0 + g1 sin(y)
    """

    kb: float = 0.5
    a3: float = 1.0
    s0: float = 0.4
    s1: float = 0.1
    kf: float = 0.5
    g0: float = 1.0
    g1: float = 0.1


def _trig_moments(mu):
    cache = mu._cache
    if "trig" not in cache:
        z = mu.points
        cache["trig"] = (mu.weights @ np.cos(z), mu.weights @ np.sin(z))
    return cache["trig"]


def conv_sin(x, mu):
    c, s = _trig_moments(mu)
    return np.sin(x) * c + np.cos(x) * s


def conv_cos(x, mu):
    c, s = _trig_moments(mu)
    return np.cos(x) * c - np.sin(x) * s


class ConvolutionModel:
    def __init__(self, p: ConvolutionModelParams):
        if p.s0 <= abs(p.s1):
            raise PreconditionError("convolution model needs s0 > |s1| for a nondegenerate sigma")
        self.p = p

    def b(self, x, mu, y):
        p = self.p
        return -x + p.kb * conv_sin(x, mu) + p.a3 * np.tanh(y)

    def sigma(self, x, mu):
        p = self.p
        return (p.s0 + p.s1 * conv_cos(x, mu))[:, :, None]

    def f(self, x, mu, y):
        return -y + self.p.kf * conv_sin(x, mu)

    def g(self, x, mu, y):
        p = self.p
        return (p.g0 + p.g1 * np.sin(y))[:, :, None]

    def dx_sigma(self, x, mu):
        return (-self.p.s1 * conv_sin(x, mu))[:, :, None, None]

    def dmu_sigma(self, x, mu, z):
        return (-self.p.s1 * np.sin(x + z))[:, :, None, None]

    def dmu_sigma_dir(self, x, mu, v):
        # sum_j w_j (-s1 sin(x + z_j)) v_j, expanded so the cost is O(N + P)
        z, w = mu.points[:, 0], mu.weights
        cv = w @ (np.cos(z) * v[:, 0])
        sv = w @ (np.sin(z) * v[:, 0])
        out = -self.p.s1 * (np.sin(x[:, 0]) * cv + np.cos(x[:, 0]) * sv)
        return out[:, None, None]


def convolution_model(params=None, **overrides):
    """Nonlinear 1-D model; averaged-drift derivatives come from finite differences."""
    if params is None:
        params = ConvolutionModelParams(**overrides)
    elif overrides:
        params = ConvolutionModelParams(**{**params.__dict__, **overrides})
    cm = ConvolutionModel(params)
    return CoefficientSet(
        dims=(1, 1, 1, 1),
        b=cm.b,
        sigma=cm.sigma,
        f=cm.f,
        g=cm.g,
        dx_sigma=cm.dx_sigma,
        dmu_sigma=cm.dmu_sigma,
        dmu_sigma_dir=cm.dmu_sigma_dir,
        has_analytic_oracle=False,
        name="convolution",
        params=dict(params.__dict__),
    )


MODELS = {"linear": (linear_model, LinearModelParams), "convolution": (convolution_model, ConvolutionModelParams)}


def build_model(name, params=None):
    try:
        factory, ptype = MODELS[name]
    except KeyError:
        raise PreconditionError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory(ptype(**(params or {})))


# --------------------------------------------------------------------- probes


def dissipativity_probe(coeffs, sample_count=1000, seed=0, x_box=3.0, y_box=5.0, batch=50):
    """Empirical margin in the fast-drift dissipativity condition.

    Returns the infimum over sampled (x, mu, y1, y2) of

        -[2 <f(y1) - f(y2), y1 - y2> + 5 |g(y1) - g(y2)|^2] / |y1 - y2|^2

    A positive value is necessary (not sufficient) evidence that the
    condition holds with constant gamma.  Pairs are kept at least
    ``0.1 * y_box`` apart so rounding in f does not pollute the ratio.
    """
    if sample_count < 100:
        raise PreconditionError("dissipativity_probe needs sample_count >= 100")
    n, m = coeffs.n, coeffs.m
    stream = NoiseStream(seed, 0, PROBE)
    worst = np.inf
    done, step = 0, 0
    while done < sample_count:
        k = min(batch, sample_count - done)
        u = stream.uniform(step, k, 2 * n + 2 * m + 2)
        step += 1
        x = x_box * (2 * u[:, :n] - 1)
        y1 = y_box * (2 * u[:, n : n + m] - 1)
        direction = stream.normal(step, k, m)
        step += 1
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = y_box * (0.1 + 0.9 * u[:, -1:])
        y2 = y1 + radius * direction
        centre = x_box * (2 * u[:1, n + m : 2 * n + m] - 1)
        cloud = centre + stream.normal(step, 32, n)
        step += 1
        mu = EmpiricalMeasure(cloud)
        df = check_finite(coeffs.f(x, mu, y1), "f") - check_finite(coeffs.f(x, mu, y2), "f")
        dg = check_finite(coeffs.g(x, mu, y1), "g") - check_finite(coeffs.g(x, mu, y2), "g")
        dy = y1 - y2
        num = 2 * np.sum(df * dy, axis=1) + 5 * np.sum(dg**2, axis=(1, 2))
        ratio = -num / np.sum(dy**2, axis=1)
        worst = min(worst, float(ratio.min()))
        done += k
    return worst


def oracle_rate_lq(params, x0, target, horizon=1.0):
    """Closed-form endpoint rate of the linear model's skeleton.

    The deviation from the free path obeys D' = lam D + sigma0 hdot, so the
    cheapest control reaching D(T) = target - free costs
    (target - free)^2 / (2 sigma0^2 int_0^T e^{2 lam (T-s)} ds).
    """
    lam = params.a1 + params.a3 * params.c1
    kappa = params.a2 + params.a3 * params.c2
    free = x0 * np.exp((lam + kappa) * horizon)
    if params.sigma0 == 0:
        return 0.0 if target == free else np.inf
    gram = horizon if abs(lam) < 1e-12 else np.expm1(2 * lam * horizon) / (2 * lam)
    return (target - free) ** 2 / (2 * params.sigma0**2 * gram)
