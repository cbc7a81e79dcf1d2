import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtri

from mvscale.errors import PreconditionError
from mvscale.fluctuation import averaging_rate_experiment, clt_experiment, ks_statistic, normal_cdf, sample_moments
from mvscale.model import linear_model, oracle_clt_variance
from mvscale.sim import SimConfig, constant_theta, simulate_limit_fluctuation


def test_ks_inverse_transform_sample():
    u = np.random.default_rng(0).uniform(size=10_000)
    D, thr = ks_statistic(ndtri(u), normal_cdf(1.0))
    assert thr == pytest.approx(0.0136)
    assert D < thr


def test_ks_matches_scipy():
    z = np.random.default_rng(1).normal(size=500) * 1.2
    D, _ = ks_statistic(z, normal_cdf(1.0))
    assert D == pytest.approx(stats.kstest(z, "norm").statistic, abs=1e-14)


def test_ks_constant_sample():
    D, _ = ks_statistic(np.zeros(200), normal_cdf(1.0))
    assert D >= 0.5


def test_ks_mass_outside_support():
    D, _ = ks_statistic(np.full(100, -5.0), lambda x: np.clip(x, 0.0, 1.0))
    assert D <= 1.0
    assert D == pytest.approx(1.0)


def test_ks_needs_100_samples():
    with pytest.raises(PreconditionError):
        ks_statistic(np.zeros(99), normal_cdf(1.0))


def test_sample_moments_standard_errors():
    z = np.random.default_rng(2).normal(size=40_000)
    m = sample_moments(z)
    assert abs(m["mean"][0]) <= 3 * m["mean"][1]
    assert abs(m["variance"][0] - 1) <= 3 * m["variance"][1]
    assert abs(m["moment4"][0] - 3) <= 3 * m["moment4"][1]


def test_rate_experiment_guard(linear):
    with pytest.raises(PreconditionError):
        averaging_rate_experiment(linear, SimConfig(), [0.02, 0.01])
    with pytest.raises(PreconditionError):
        averaging_rate_experiment(linear, SimConfig(), [0.01, 0.02, 0.005])


def test_rate_experiment_decoupled_error_is_discretisation_only():
    c = linear_model(a3=0.0)
    fit = averaging_rate_experiment(c, SimConfig(particles=50, replicas=2), [0.04, 0.02, 0.01])
    assert all(err < 1e-3 for _, err, _ in fit.errors)
    assert len(fit.sixth_moments) == 3 and len(fit.fast_growth) == 3


def test_clt_degenerate_case():
    c = linear_model(a3=0.0)
    cfg = SimConfig(epsilon=0.005, particles=100, replicas=1)
    report = clt_experiment(c, cfg, constant_theta(0.0), 1.0)
    assert report.degenerate
    assert report.row("variance", 0.005)["value"] < 0.05
    assert report.row("ks_skipped_degenerate")["value"] == 1.0
    with pytest.raises(KeyError):
        report.row("ks_D")


def test_clt_variance_approaches_oracle(linear, params):
    target = oracle_clt_variance(params, 1.0)
    cfg = SimConfig(particles=1000, replicas=4)
    gaps = []
    for eps in (0.02, 0.01, 0.005):
        report = clt_experiment(linear, cfg, constant_theta(1.0), 1.0, (1.0, 0.75), [eps])
        row = report.row("variance", eps)
        gaps.append((abs(row["value"] - target), row["std_error"]))
    for (g_prev, se_prev), (g, _) in zip(gaps, gaps[1:]):
        assert g <= g_prev + se_prev


def test_limit_ensemble_ks(linear, params):
    var = oracle_clt_variance(params, 1.0)
    passed = 0
    for seed in range(20):
        # particles of one system share the empirical-measure mode; thinning a
        # large system gives nearly independent draws for the KS test
        rec = simulate_limit_fluctuation(linear, SimConfig(particles=2000, seed=seed), constant_theta(1.0), 1.0)
        D, thr = ks_statistic(rec.pooled("z")[::10, 0], normal_cdf(var))
        passed += D < thr
    assert passed >= 18


def test_clt_report_csv_schema(linear):
    report = clt_experiment(linear, SimConfig(epsilon=0.02, particles=100, replicas=1), constant_theta(1.0), 1.0)
    lines = report.to_csv().splitlines()
    assert lines[0] == "epsilon,statistic,value,std_error,oracle,pass"
    stats_seen = {line.split(",")[1] for line in lines[1:]}
    assert {"limit_variance", "variance", "mean", "moment4", "count", "ks_D"} <= stats_seen
    assert report.ks["kind"] == "one-sample"
    for line in lines[1:]:
        assert line.split(",")[5] in ("", "pass", "fail")
