"""Central-limit experiment and averaging-rate fit."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import ks_2samp

from .errors import PreconditionError
from .model import LinearModelParams, oracle_clt_variance
from .sim import coupled_deviation, simulate_limit_fluctuation


def ks_statistic(samples, cdf):
    """Exact one-sample Kolmogorov-Smirnov D and the asymptotic 95% threshold 1.36/sqrt(n)."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 100:
        raise PreconditionError("ks_statistic needs at least 100 samples")
    F = np.clip(np.asarray(cdf(x), dtype=float), 0.0, 1.0)
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - F)), float(np.max(F - (i - 1) / n)))
    return min(d, 1.0), 1.36 / math.sqrt(n)


def normal_cdf(var):
    sd = math.sqrt(var)
    return lambda x: ndtr(np.asarray(x) / sd)


def sample_moments(z):
    """Mean, variance and raw 4th moment with their standard errors."""
    z = np.asarray(z, dtype=float).ravel()
    n = z.size
    mean = z.mean()
    var = z.var(ddof=1)
    c4 = np.mean((z - mean) ** 4)
    z4 = z**4
    return {
        "mean": (float(mean), float(math.sqrt(var / n))),
        "variance": (float(var), float(math.sqrt(max(c4 - var**2, 0.0) / n))),
        "moment4": (float(z4.mean()), float(z4.std(ddof=1) / math.sqrt(n))),
    }


def _fit_loglog(eps, err):
    le, lr = np.log(eps), np.log(err)
    slope, intercept = np.polyfit(le, lr, 1)
    resid = lr - (slope * le + intercept)
    ss_tot = np.sum((lr - lr.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


@dataclass
class RateFit:
    slope: float
    r2: float
    errors: list  # (epsilon, mean sup-grid |X^eps - Xbar|^2, SE)
    sixth_moments: list = field(default_factory=list)  # (epsilon, E sup|X|^6, SE)
    fast_growth: list = field(default_factory=list)  # (epsilon, eps E sup|Y|^4, SE)


def averaging_rate_experiment(coeffs, cfg_base, eps_list, init=(1.0, 0.0), bbar_provider=None):
    """Fit log E[sup_t |X^eps - Xbar|^2] against log eps over a decreasing eps sweep."""
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise PreconditionError("eps_list needs at least 3 strictly decreasing values")
    errors, sixth, growth = [], [], []
    for eps in eps_list:
        rec = coupled_deviation(coeffs, cfg_base.with_(epsilon=eps), bbar_provider, init)
        errors.append((eps,) + rec.sup_mean("dev2"))
        sixth.append((eps,) + rec.sup_mean("abs_x", 6))
        m4, se4 = rec.sup_mean("abs_y", 4)
        growth.append((eps, eps * m4, eps * se4))
    err = np.array([e[1] for e in errors])
    if np.all(err > 0):
        slope, r2 = _fit_loglog(np.array(eps_list), err)
    else:
        slope = r2 = float("nan")
    return RateFit(slope, r2, errors, sixth, growth)


@dataclass
class CltReport:
    """Rows of (epsilon, statistic, value, std_error, oracle, pass)."""

    rows: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)
    degenerate: bool = False
    ks: dict = field(default_factory=dict)
    rate: RateFit = None

    def add(self, eps, stat, value, se, oracle=float("nan"), ok=None):
        self.rows.append({"epsilon": eps, "statistic": stat, "value": value, "std_error": se, "oracle": oracle, "pass": ok})

    def row(self, stat, eps=None):
        for r in self.rows:
            if r["statistic"] == stat and (eps is None or r["epsilon"] == eps):
                return r
        raise KeyError(stat)

    @property
    def passed(self):
        return all(r["pass"] for r in self.rows if r["pass"] is not None)

    def to_csv(self):
        fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "statistic", "value", "std_error", "oracle", "pass"])
        for r in self.rows:
            ok = "" if r["pass"] is None else ("pass" if r["pass"] else "fail")
            w.writerow([repr(float(r["epsilon"])), r["statistic"], repr(float(r["value"])), repr(float(r["std_error"])), repr(float(r["oracle"])), ok])
        return fh.getvalue()


def _oracle_variance(coeffs, t):
    if coeffs.has_analytic_oracle and coeffs.name == "linear":
        return float(oracle_clt_variance(LinearModelParams(**coeffs.params), t))
    return None


def clt_experiment(coeffs, cfg, theta_provider, t_eval=1.0, init=(1.0, 0.0), eps_list=None, bbar_provider=None):
    """Compare Z^eps(t_eval) with the limiting fluctuation law.

    For every epsilon the pooled Z^eps samples (replicas x particles) are
    summarised by mean, variance and 4th moment.  At the smallest epsilon the
    moments are checked against the limiting-equation ensemble and, for the
    linear model, against the closed-form variance; a one-sample KS test
    against N(0, oracle variance) is run in one slow dimension.  Without a
    closed form the KS test is two-sample against the limiting ensemble.
    """
    if coeffs.n != 1:
        raise PreconditionError("clt_experiment's KS comparison needs one slow dimension")
    eps_list = sorted({float(e) for e in (eps_list or [cfg.epsilon])}, reverse=True)
    cfg_t = cfg.with_(horizon=t_eval)
    oracle = _oracle_variance(coeffs, t_eval)
    report = CltReport(epsilons=eps_list)

    lim = simulate_limit_fluctuation(coeffs, cfg_t, theta_provider, init[0], bbar_provider)
    zlim = lim.pooled("z")[:, 0]
    lm = sample_moments(zlim)
    ora = oracle if oracle is not None else float("nan")
    v, se = lm["variance"]
    report.add(0.0, "limit_variance", v, se, ora, None if oracle is None else abs(v - oracle) <= 3 * se)
    report.add(0.0, "limit_mean", *lm["mean"], 0.0, abs(lm["mean"][0]) <= 3 * lm["mean"][1])
    report.add(0.0, "limit_moment4", *lm["moment4"])

    for eps in eps_list:
        rec = coupled_deviation(coeffs, cfg_t.with_(epsilon=eps), bbar_provider, init)
        z = rec.pooled("z")[:, 0]
        zm = sample_moments(z)
        final = eps == eps_list[-1]
        v, se = zm["variance"]
        var_ok = None
        if final:
            if oracle is not None:
                var_ok = abs(v - oracle) <= max(0.10 * oracle, 3 * se)
            else:
                comb = math.hypot(se, lm["variance"][1])
                var_ok = abs(v - lm["variance"][0]) <= max(0.10 * lm["variance"][0], 3 * comb)
        report.add(eps, "variance", v, se, ora, var_ok)
        m, mse = zm["mean"]
        report.add(eps, "mean", m, mse, 0.0, (abs(m) <= 3 * mse) if final else None)
        report.add(eps, "moment4", *zm["moment4"], 3 * ora**2 if oracle is not None else float("nan"))
        report.add(eps, "count", z.size, 0.0)
        if not final:
            continue
        limit_var = oracle if oracle is not None else lm["variance"][0]
        if limit_var <= 1e-14:
            report.degenerate = True
            report.ks = {"degenerate": True}
            report.add(eps, "ks_skipped_degenerate", 1.0, 0.0)
            continue
        if oracle is not None:
            D, thr = ks_statistic(z, normal_cdf(oracle))
            kind = "one-sample"
        else:
            D = float(ks_2samp(z, zlim).statistic)
            thr = 1.36 * math.sqrt((z.size + zlim.size) / (z.size * zlim.size))
            kind = "two-sample"
        report.ks = {"D": D, "threshold": thr, "kind": kind, "count": z.size}
        report.add(eps, "ks_D", D, 0.0, thr, D < thr)
    return report
