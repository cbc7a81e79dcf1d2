import math

import numpy as np
import pytest

from mvscale.errors import ModelError, PreconditionError
from mvscale.measure import EmpiricalMeasure
from mvscale.model import (
    LinearModelParams,
    build_model,
    convolution_model,
    dissipativity_probe,
    linear_model,
    oracle_bbar,
    oracle_clt_variance,
    oracle_frozen_invariant,
    oracle_phi,
    oracle_rate_lq,
    oracle_theta,
)

from conftest import scalar_model

X1 = np.array([[1.0]])
DIRAC1 = EmpiricalMeasure.dirac([1.0])


def test_linear_drift_substitution(linear):
    assert linear.b(X1, DIRAC1, np.array([[2.0]]))[0, 0] == 1.5


def test_linear_dx_bbar(linear):
    assert linear.dx_bbar(X1, DIRAC1)[0, 0, 0] == -0.5


def test_linear_decoupled_dmu_bbar():
    c = linear_model(a3=0.0)
    assert c.dmu_bbar(X1, DIRAC1, X1)[0, 0, 0] == 0.5


def test_linear_shapes_and_slots(linear):
    x = np.zeros((7, 1))
    mu = EmpiricalMeasure(np.arange(4.0).reshape(-1, 1))
    assert linear.b(x, mu, x).shape == (7, 1)
    assert linear.sigma(x, mu).shape == (7, 1, 1)
    assert linear.f(x, mu, x).shape == (7, 1)
    assert linear.g(x, mu, x).shape == (7, 1, 1)
    assert linear.dx_sigma(x, mu).shape == (7, 1, 1, 1)
    assert linear.has_analytic_oracle
    assert linear.dims == (1, 1, 1, 1)


def test_dmu_bbar_dir_contracts_against_weights(linear):
    mu = EmpiricalMeasure(np.arange(4.0).reshape(-1, 1))
    v = np.array([[1.0], [2.0], [3.0], [4.0]])
    out = linear.dmu_bbar_dir(np.zeros((4, 1)), mu, v)
    np.testing.assert_allclose(out, 0.75 * 2.5)


def test_oracle_bbar(params):
    assert oracle_bbar(params, 1, 1) == 0.25
    assert oracle_bbar(params, 0, 0) == 0.0
    p = LinearModelParams(a3=0.0)
    assert oracle_bbar(p, 2, 0) == 2 * p.a1


def test_oracle_bbar_matches_model_slot(linear, params):
    mu = EmpiricalMeasure(np.array([[0.0], [3.0]]))
    assert linear.bbar(np.array([[2.0]]), mu)[0, 0] == pytest.approx(oracle_bbar(params, 2.0, 1.5))


def test_oracle_frozen_invariant(params):
    assert oracle_frozen_invariant(params, 1, 1) == (0.75, 0.5)
    assert oracle_frozen_invariant(LinearModelParams(g0=0.0), 1, 1)[1] == 0.0
    assert oracle_frozen_invariant(params, 0, 0) == (0.0, 0.5)


def test_oracle_phi(params):
    assert oracle_phi(params, 1, 1, 2) == pytest.approx(1.25, abs=1e-15)
    assert oracle_phi(params, 1, 1, 0.75) == 0.0
    assert oracle_phi(LinearModelParams(a3=0.0), 1, 1, 5.0) == 0.0


def test_oracle_phi_solves_poisson_equation(params):
    # OU generator on Phi (second derivative vanishes): f * dPhi/dy = -(b - bbar)
    rng = np.random.default_rng(11)
    for x, mean, y in rng.uniform(-3, 3, size=(20, 3)):
        f = -y + params.c1 * x + params.c2 * mean
        gen = f * params.a3
        b = params.a1 * x + params.a2 * mean + params.a3 * y
        assert abs(gen + (b - oracle_bbar(params, x, mean))) < 1e-12


def test_oracle_theta(params):
    assert oracle_theta(params) == 1.0
    assert oracle_theta(LinearModelParams(a3=0.0)) == 0.0
    assert oracle_theta(LinearModelParams(g0=2.0, a3=0.5)) == 1.0


def test_oracle_clt_variance(params):
    assert oracle_clt_variance(params, 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert oracle_clt_variance(params, 0.0) == 0.0
    assert oracle_clt_variance(LinearModelParams(a3=0.0), 1.0) == 0.0


def test_oracle_clt_variance_continuous_at_zero_rate():
    # lambda = a1 + a3 c1; switch happens at |lambda| = 1e-8
    vals = [oracle_clt_variance(LinearModelParams(a1=-0.5 + s), 1.0) for s in (-1.0001e-8, -0.9999e-8, 0.9999e-8, 1.0001e-8)]
    assert abs(vals[0] - vals[1]) < 1e-9
    assert abs(vals[2] - vals[3]) < 1e-9


def test_oracle_clt_variance_solves_variance_ode(params):
    # Var' = 2 lam Var + Theta^2 checked by central differences
    t, h = 0.7, 1e-5
    d = (oracle_clt_variance(params, t + h) - oracle_clt_variance(params, t - h)) / (2 * h)
    assert d == pytest.approx(2 * -0.5 * oracle_clt_variance(params, t) + 1.0, rel=1e-8)


def test_oracle_rate_lq_value(params):
    # deviation ODE D' = -0.5 D + 0.3 hdot; minimal energy over int e^{-(1-s)} ds
    direct = (2.0 - math.exp(0.25)) ** 2 / (2 * 0.09 * (1 - math.exp(-1)))
    assert oracle_rate_lq(params, 1.0, 2.0) == pytest.approx(direct, rel=1e-14)
    assert direct == pytest.approx(4.5053, abs=1e-4)
    assert oracle_rate_lq(params, 1.0, math.exp(0.25)) == pytest.approx(0.0, abs=1e-20)
    assert oracle_rate_lq(LinearModelParams(sigma0=0.0), 1.0, 2.0) == math.inf


@pytest.mark.parametrize("seed", [0, 1, 77, 2**40])
def test_probe_linear_is_two(linear, seed):
    assert abs(dissipativity_probe(linear, 1000, seed=seed) - 2.0) < 1e-12


def test_probe_anti_dissipative():
    c = scalar_model(f=lambda x, m, y: y, g=1.0)
    assert dissipativity_probe(c, 200) < 0


def test_probe_lipschitz_noise_bound():
    c = scalar_model(f=lambda x, m, y: -2 * y, g=lambda y: 1.0 + 0.1 * np.sin(y))
    assert dissipativity_probe(c, 1000) >= 3.95 - 1e-9


def test_probe_nan_is_model_error():
    c = scalar_model(f=lambda x, m, y: np.full_like(y, np.nan), g=1.0)
    with pytest.raises(ModelError):
        dissipativity_probe(c, 100)


def test_probe_sample_guard(linear):
    with pytest.raises(PreconditionError):
        dissipativity_probe(linear, 99)


def test_convolution_model_probe_positive():
    assert dissipativity_probe(convolution_model(), 1000) > 0


def test_convolution_shapes_and_finite():
    c = convolution_model()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 1))
    y = rng.normal(size=(9, 1))
    mu = EmpiricalMeasure(rng.normal(size=(30, 1)))
    for out, shape in ((c.b(x, mu, y), (9, 1)), (c.sigma(x, mu), (9, 1, 1)), (c.f(x, mu, y), (9, 1)), (c.g(x, mu, y), (9, 1, 1))):
        assert out.shape == shape
        assert np.all(np.isfinite(out))


def test_convolution_matches_direct_integral():
    c = convolution_model()
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(25, 1))
    mu = EmpiricalMeasure(pts)
    x = np.array([[0.4]])
    direct = np.mean(np.sin(0.4 + pts[:, 0]))
    assert c.f(x, mu, np.zeros((1, 1)))[0, 0] == pytest.approx(0.5 * direct, rel=1e-13)


def test_convolution_sigma_derivative_slots():
    c = convolution_model()
    rng = np.random.default_rng(2)
    mu = EmpiricalMeasure(rng.normal(size=(20, 1)))
    x = np.array([[0.3], [-1.1]])
    h = 1e-6
    fd = (c.sigma(x + h, mu) - c.sigma(x - h, mu)) / (2 * h)
    np.testing.assert_allclose(c.dx_sigma(x, mu)[..., 0], fd, atol=1e-8)
    # Lions derivative along a perturbation cloud = d/ds sigma(x, law(p + s v))
    v = rng.normal(size=(20, 1))
    lift = lambda s: c.sigma(x, EmpiricalMeasure(mu.points + s * v))  # noqa: E731
    fd_mu = (lift(h) - lift(-h)) / (2 * h)
    np.testing.assert_allclose(c.dmu_sigma_dir(x, mu, v), fd_mu, atol=1e-8)


def test_build_model_registry():
    assert build_model("linear").name == "linear"
    assert build_model("linear", {"a1": -2.0}).params["a1"] == -2.0
    with pytest.raises(PreconditionError):
        build_model("nope")
