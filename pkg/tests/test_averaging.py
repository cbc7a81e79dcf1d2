import math

import numpy as np
import pytest
from scipy import stats

from mvscale.averaging import (
    AveragedField,
    AveragingOptions,
    EstimatedBbar,
    EstimatedTheta,
    estimate_bbar,
    estimate_dphi_dy,
    estimate_phi,
    estimate_theta,
    psd_sqrt,
    sample_invariant,
)
from mvscale.errors import AssumptionViolation, EstimationError
from mvscale.measure import EmpiricalMeasure
from mvscale.model import LinearModelParams, convolution_model, linear_model, oracle_bbar, oracle_phi

from conftest import scalar_model

MU1 = EmpiricalMeasure.dirac([1.0])


def test_invariant_sample_moments(linear):
    pool = sample_invariant(linear, 1.0, MU1, AveragingOptions(replicas=100)).points[:, 0]
    per_rep = pool.reshape(100, -1)
    means = per_rep.mean(axis=1)
    second = ((per_rep - 0.75) ** 2).mean(axis=1)
    assert abs(means.mean() - 0.75) <= 3 * means.std(ddof=1) / 10
    assert abs(second.mean() - 0.5) <= 3 * second.std(ddof=1) / 10


def test_invariant_deterministic_contraction():
    c = linear_model(g0=0.0)
    pool = sample_invariant(c, 1.0, MU1, AveragingOptions(replicas=4, burn_in=20.0)).points
    assert np.all(np.abs(pool - 0.75) < 1e-6)


def test_invariant_standard_normal():
    c = scalar_model(f=lambda x, m, y: -y, g=math.sqrt(2.0))
    pool = sample_invariant(c, 0.0, MU1, AveragingOptions(replicas=200, step=0.002)).points[:, 0]
    assert stats.kstest(pool, "norm").statistic < 1.36 / math.sqrt(pool.size)


def test_refuses_non_dissipative_fast_drift():
    c = scalar_model(f=lambda x, m, y: y, g=1.0)
    with pytest.raises(AssumptionViolation):
        sample_invariant(c, 0.0, MU1, AveragingOptions(replicas=2))


def test_refuses_unstable_step(linear):
    with pytest.raises(AssumptionViolation):
        sample_invariant(linear, 0.0, MU1, AveragingOptions(replicas=2, step=1.5))


def test_bbar_linear(linear):
    est = estimate_bbar(linear, 1.0, MU1)
    assert est.std_error[0] > 0
    assert abs(est.value[0] - 0.25) <= 3 * est.std_error[0]
    assert est.meta["burn_in"] == pytest.approx(5.0)


def test_bbar_y_independent_is_exact():
    c = scalar_model(b=lambda x, m, y: 2 * x - m + 0.0 * y, f=lambda x, m, y: -y, g=1.0)
    est = estimate_bbar(c, 1.5, MU1, AveragingOptions(replicas=10))
    assert abs(est.value[0] - 2.0) < 1e-12


def test_bbar_pure_fast_coupling():
    p = LinearModelParams(a1=0.0, a2=0.0, a3=1.0, g0=1.0)
    c = linear_model(p)
    mu = EmpiricalMeasure.dirac([2.0])
    est = estimate_bbar(c, 1.0, mu)
    assert abs(est.value[0] - (p.c1 * 1.0 + p.c2 * 2.0)) <= 3 * est.std_error[0]


def test_bbar_coverage(linear, params):
    inside = 0
    for seed in range(40):
        est = estimate_bbar(linear, 1.0, MU1, AveragingOptions(replicas=50, seed=seed, gamma=2.0))
        inside += abs(est.value[0] - oracle_bbar(params, 1, 1)) <= 3 * est.std_error[0]
    assert inside >= 38


def test_se_scales_with_replicas(linear):
    se = [estimate_bbar(linear, 1.0, MU1, AveragingOptions(replicas=r, gamma=2.0)).std_error[0] for r in (200, 800)]
    assert se[0] / se[1] == pytest.approx(2.0, rel=0.3)


def test_phi_linear(linear, params):
    est = estimate_phi(linear, None, 1.0, MU1, 2.0, AveragingOptions(replicas=2000))
    ref = oracle_phi(params, 1, 1, 2)
    assert abs(est.value[0] - ref) <= max(3 * est.std_error[0], 0.02 * ref)
    assert not est.meta["tail_warning"]


def test_phi_vanishes_at_stationary_mean(linear):
    est = estimate_phi(linear, None, 1.0, MU1, 0.75, AveragingOptions(replicas=1000))
    assert abs(est.value[0]) <= 3 * est.std_error[0]


def test_phi_decoupled_is_zero():
    c = linear_model(a3=0.0)
    est = estimate_phi(c, None, 1.0, MU1, 2.0, AveragingOptions(replicas=20))
    assert abs(est.value[0]) < 1e-12


def test_phi_tail_warning_on_short_horizon(linear):
    with pytest.warns(UserWarning, match="truncated"):
        est = estimate_phi(linear, None, 1.0, MU1, 5.0, AveragingOptions(replicas=500, phi_horizon=0.5))
    assert est.meta["tail_warning"]


def test_phi_centered_under_invariant_law(linear):
    pool = sample_invariant(linear, 1.0, MU1, AveragingOptions(replicas=2)).points[:, 0]
    ys = pool[:: max(1, pool.size // 16)][:16]
    vals = np.array([estimate_phi(linear, None, 1.0, MU1, y, AveragingOptions(replicas=100, seed=int(i))).value[0] for i, y in enumerate(ys)])
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_dphi_linear(linear):
    est = estimate_dphi_dy(linear, None, 1.0, MU1, 0.0, AveragingOptions(replicas=200))
    assert est.value[0, 0] == pytest.approx(1.0, rel=0.03)


def test_dphi_decoupled():
    est = estimate_dphi_dy(linear_model(a3=0.0), None, 1.0, MU1, 0.0, AveragingOptions(replicas=20))
    assert abs(est.value[0, 0]) < 1e-10


def test_dphi_scaled():
    c = linear_model(a3=0.5, g0=2.0)
    est = estimate_dphi_dy(c, None, 1.0, MU1, 0.0, AveragingOptions(replicas=200))
    assert est.value[0, 0] == pytest.approx(0.5, rel=0.03)


def test_theta_linear(linear):
    est = estimate_theta(linear, 1.0, MU1)
    assert est.value[0, 0] == pytest.approx(1.0, rel=0.05)
    assert est.std_error[0, 0] >= 0


def test_theta_decoupled():
    est = estimate_theta(linear_model(a3=0.0), 1.0, MU1, AveragingOptions(replicas=10, theta_samples=8))
    np.testing.assert_array_equal(est.value, np.zeros((1, 1)))


def test_psd_sqrt_diagonal():
    np.testing.assert_allclose(psd_sqrt(np.diag([2.0, 8.0])), np.diag([math.sqrt(2), 2 * math.sqrt(2)]), atol=1e-15)


def test_psd_sqrt_symmetric_and_psd():
    rng = np.random.default_rng(4)
    for _ in range(10):
        B = rng.normal(size=(3, 3))
        A = B @ B.T
        R = psd_sqrt(A)
        assert np.max(np.abs(R - R.T)) < 1e-12
        assert np.linalg.eigvalsh(R).min() >= -1e-10
        np.testing.assert_allclose(R @ R, A, atol=1e-10)


def test_psd_sqrt_clipping_policy():
    with pytest.warns(UserWarning):
        psd_sqrt(np.diag([1.0, -1e-7]))
    with pytest.raises(EstimationError):
        psd_sqrt(np.diag([1.0, -1e-3]))


def test_averaged_field_rejects_bad_se():
    with pytest.raises(EstimationError):
        AveragedField(np.zeros(1), np.array([-1.0]))
    with pytest.raises(EstimationError):
        AveragedField(np.zeros(1), np.array([np.nan]))


def test_estimated_bbar_provider(linear, params):
    prov = EstimatedBbar(linear, AveragingOptions(replicas=64))
    x = np.array([[0.0], [1.0], [2.0]])
    out = prov(x, MU1)
    ref = np.array([oracle_bbar(params, v, 1.0) for v in x[:, 0]])
    assert out.shape == (3, 1)
    np.testing.assert_allclose(out[:, 0], ref, atol=0.1)
    np.testing.assert_array_equal(prov(x, MU1), out)


def test_estimated_theta_provider(linear):
    prov = EstimatedTheta(linear, nodes=3)
    mu = EmpiricalMeasure(np.array([[0.5], [1.0], [1.5]]))
    out = prov(mu.points, mu)
    assert out.shape == (3, 1, 1)
    np.testing.assert_allclose(out[:, 0, 0], 1.0, rtol=0.15)


def test_convolution_estimates_are_finite():
    c = convolution_model()
    mu = EmpiricalMeasure(np.linspace(-1, 1, 9).reshape(-1, 1))
    est = estimate_bbar(c, 0.3, mu, AveragingOptions(replicas=20))
    assert np.all(np.isfinite(est.value)) and est.std_error[0] > 0
