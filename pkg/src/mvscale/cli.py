"""Command-line experiment runner.

    mvscale <subcommand> --config run.toml [--out DIR] [subcommand flags]

Every run writes, into the output directory:

    <subcommand>.csv   results with a fixed column schema (see docs/config-reference.md)
    summary.csv        check,value,threshold,pass
    manifest.json      config echo, version, seed, status and any error

The exit status is 0 iff every check passes, 1 on a failed check or a module
error, 2 on usage or config errors.
"""

import argparse
import csv
import io
import json
import math
import os
import subprocess
import sys
import warnings

import numpy as np

from . import __version__
from .averaging import AveragingOptions, EstimatedBbar, EstimatedTheta, estimate_bbar, estimate_phi, estimate_theta
from .config import SUBCOMMANDS, parse_config
from .errors import ConfigError, MvscaleError
from .fluctuation import averaging_rate_experiment, clt_experiment
from .ldp import Control, RateOptions, controlled_convergence_experiment, rate_function
from .measure import EmpiricalMeasure
from .model import (
    LinearModelParams,
    build_model,
    dissipativity_probe,
    oracle_bbar,
    oracle_phi,
    oracle_rate_lq,
    oracle_theta,
)
from .sim import (
    GaussianInit,
    SimConfig,
    constant_theta,
    coupled_deviation,
    default_workers,
    simulate_averaged,
    simulate_limit_fluctuation,
    simulate_slowfast,
    simulate_smallnoise,
)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "fail"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows):
    fh = io.StringIO()
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return fh.getvalue()


def git_version():
    """``git describe`` of the source checkout, falling back to the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Run:
    """Collects output files and checks for one subcommand invocation."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.files = {}
        self.checks = []  # (name, value, threshold, ok)

    def check(self, name, value, threshold, ok):
        self.checks.append((name, value, threshold, bool(ok)))

    def write(self, name, text):
        self.files[name] = text

    @property
    def passed(self):
        return all(c[3] for c in self.checks)


# ------------------------------------------------------------------ helpers


def _sim_config(cfg, **kw):
    s = cfg.sim
    workers = default_workers()
    base = dict(
        epsilon=s["epsilon"], delta=s["delta"], dt_ratio=s["dt_ratio"], horizon=s["horizon"],
        particles=s["particles"], replicas=s["replicas"], seed=s["seed"],
        macro_step=s["macro_step"], record_dt=s["record_dt"], workers=workers,
    )
    base.update(kw)
    return SimConfig(**base)


def _linear_params(coeffs):
    if coeffs.name == "linear" and coeffs.has_analytic_oracle:
        return LinearModelParams(**coeffs.params)
    return None


def _providers(coeffs, seed):
    """Analytic b-bar/Theta for the linear model, on-the-fly estimates otherwise."""
    lp = _linear_params(coeffs)
    if lp is not None:
        return None, constant_theta(oracle_theta(lp), coeffs.n)
    opts = AveragingOptions(replicas=16, seed=seed)
    bbar = EstimatedBbar(coeffs, opts)
    return bbar, EstimatedTheta(coeffs, AveragingOptions(replicas=32, theta_samples=16, theta_batches=4, seed=seed), bbar_provider=bbar)


def _avg_opts(cfg, **extra):
    e = cfg.experiment
    kw = {k: e[k] for k in ("burn_in", "horizon", "spacing", "step") if k in e and e[k] is not None}
    kw.update(extra)
    return AveragingOptions(seed=cfg.sim["seed"], **kw)


# -------------------------------------------------------------- subcommands


def run_probe(coeffs, cfg, run):
    e = cfg.experiment
    gamma = dissipativity_probe(coeffs, e["samples"], seed=cfg.sim["seed"])
    run.write("probe.csv", _csv(["quantity", "value", "threshold", "pass"], [("gamma_est", gamma, 0.0, gamma > 0)]))
    run.check("gamma_est", gamma, 0.0, gamma > 0)


def run_simulate(coeffs, cfg, run):
    e = cfg.experiment
    x0 = GaussianInit(e["x0"], e["x0_std"]) if e["x0_std"] > 0 else e["x0"]
    init = (x0, e["y0"])
    sc = _sim_config(cfg)
    bbar, theta = _providers(coeffs, cfg.sim["seed"])
    kind = e["kind"]
    if kind == "slowfast":
        rec = simulate_slowfast(coeffs, sc, init)
    elif kind == "smallnoise":
        rec = simulate_smallnoise(coeffs, sc, init)
    elif kind == "averaged":
        rec = simulate_averaged(coeffs, sc, x0, bbar)
    elif kind == "coupled":
        rec = coupled_deviation(coeffs, sc, bbar, init)
    else:
        rec = simulate_limit_fluctuation(coeffs, sc, theta, e["x0"], bbar)
    run.write("simulate.csv", rec.to_csv())
    finite = all(np.all(np.isfinite(v)) for v in rec.finals.values())
    run.check("finite_final_state", float(finite), 1.0, finite)


def run_average(coeffs, cfg, run):
    e = cfg.experiment
    opts = _avg_opts(cfg, replicas=e["replicas"])
    lp = _linear_params(coeffs)
    rows = []
    for x, mean in e["points"]:
        mu = EmpiricalMeasure.dirac(np.full(coeffs.n, mean))
        est = estimate_bbar(coeffs, np.full(coeffs.n, x), mu, opts)
        for i in range(coeffs.n):
            v, se = float(est.value[i]), float(est.std_error[i])
            rows.append((f"bbar(x={x:g},mean={mean:g})", i, v, se))
            if lp is not None:
                ref = float(oracle_bbar(lp, x, mean))
                tol = max(0.02 * abs(ref), 3 * se)
                run.check(f"bbar(x={x:g},mean={mean:g})[{i}]", abs(v - ref), tol, abs(v - ref) <= tol)
    run.write("average.csv", _csv(["quantity", "coordinate", "value", "std_error"], rows))


def run_poisson(coeffs, cfg, run):
    e = cfg.experiment
    extra = {"replicas": e["replicas"]}
    if e["phi_horizon"] is not None:
        extra["phi_horizon"] = e["phi_horizon"]
    opts = _avg_opts(cfg, **extra)
    lp = _linear_params(coeffs)
    x = np.full(coeffs.n, e["x"])
    mu = EmpiricalMeasure.dirac(np.full(coeffs.n, e["mean"]))
    rows = []
    for y in e["y"]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = estimate_phi(coeffs, None, x, mu, np.full(coeffs.m, y), opts)
        label = f"phi(x={e['x']:g},mean={e['mean']:g},y={y:g})"
        for i in range(coeffs.n):
            v, se = float(est.value[i]), float(est.std_error[i])
            rows.append((label, i, v, se))
            if lp is not None:
                ref = float(oracle_phi(lp, e["x"], e["mean"], y))
                tol = max(0.05 * abs(ref), 3 * se)
                run.check(f"{label}[{i}]", abs(v - ref), tol, abs(v - ref) <= tol)
        run.check(f"{label} tail", float(np.max(est.meta["tail"])), float(3 * np.max(est.std_error)), not est.meta["tail_warning"])
    if e["theta"]:
        th_opts = opts.with_(replicas=e["theta_replicas"], theta_samples=e["theta_samples"])
        est = estimate_theta(coeffs, x, mu, th_opts)
        label = f"theta(x={e['x']:g},mean={e['mean']:g})"
        for i in range(coeffs.n):
            for j in range(coeffs.n):
                rows.append((label, i * coeffs.n + j, float(est.value[i, j]), float(est.std_error[i, j])))
        if lp is not None:
            ref = oracle_theta(lp)
            v = float(est.value[0, 0])
            run.check(label, abs(v - ref), 0.05 * ref, abs(v - ref) <= 0.05 * ref)
    run.write("poisson.csv", _csv(["quantity", "coordinate", "value", "std_error"], rows))


def run_clt(coeffs, cfg, run):
    e = cfg.experiment
    sc = _sim_config(cfg)
    bbar, theta = _providers(coeffs, cfg.sim["seed"])
    init = (e["x0"], e["y0"])
    report = clt_experiment(coeffs, sc, theta, e["t_eval"], init, e["eps_list"] or None, bbar)
    if e["rate_eps_list"]:
        fit = averaging_rate_experiment(coeffs, sc, e["rate_eps_list"], init, bbar)
        report.rate = fit
        for eps, m, se in fit.errors:
            report.add(eps, "sup_dev2", m, se)
        for eps, m, se in fit.sixth_moments:
            report.add(eps, "sup_abs_x6", m, se)
        report.add(0.0, "rate_slope", fit.slope, 0.0, 1.0, 0.8 <= fit.slope <= 1.2)
        report.add(0.0, "rate_r2", fit.r2, 0.0, 0.95, fit.r2 >= 0.95)
        sixth = [m for _, m, _ in fit.sixth_moments]
        spread = max(sixth) / min(sixth) if min(sixth) > 0 else math.inf
        report.add(0.0, "sixth_moment_spread", spread, 0.0, 10.0, math.isfinite(spread) and spread <= 10.0)
    run.write("clt.csv", report.to_csv())
    for r in report.rows:
        if r["pass"] is not None:
            run.check(f"{r['statistic']}@eps={r['epsilon']:g}", r["value"], r["oracle"], r["pass"])


def run_rate(coeffs, cfg, run):
    e = cfg.experiment
    bbar, _ = _providers(coeffs, cfg.sim["seed"])
    opts = RateOptions(K=e["grid_k"], horizon=cfg.sim["horizon"], rho_schedule=tuple(e["rho_schedule"]),
                       tol=e["tol"], max_iter=e["max_iter"])
    res = rate_function(coeffs, bbar, e["x0"], e["target"], opts)
    rows = [
        ("target", float(res.target[0])),
        ("rate", res.rate),
        ("residual", res.residual),
        ("feasible", float(res.feasible)),
        ("endpoint", float(np.atleast_1d(res.endpoint)[0])),
    ]
    lp = _linear_params(coeffs)
    if lp is not None:
        ref = float(oracle_rate_lq(lp, e["x0"], e["target"], cfg.sim["horizon"]))
        rows.append(("oracle_rate", ref))
        run.check("rate_vs_oracle", abs(res.rate - ref), 0.02 * ref, abs(res.rate - ref) <= 0.02 * ref)
    run.check("feasible", float(res.feasible), 1.0, res.feasible)
    run.write("rate.csv", _csv(["quantity", "value"], rows))
    run.write("rate_trace.csv", _csv(["rho", "iterations", "grad_norm", "energy", "residual"],
                                     [(t["rho"], t["iterations"], t["grad_norm"], t["energy"], t["residual"]) for t in res.trace]))
    ctl = res.control
    run.write("rate_control.csv", _csv(["interval", "t_start", "channel", "hdot"],
                                       [(k, ctl.edges[k], c, ctl.hdot[k, c]) for k in range(ctl.K) for c in range(ctl.hdot.shape[1])]))


def run_controlled(coeffs, cfg, run):
    e = cfg.experiment
    bbar, _ = _providers(coeffs, cfg.sim["seed"])
    channels = coeffs.d1 + coeffs.d2
    hdot = np.zeros(channels)
    hdot[: coeffs.d1] = e["control_value"]
    h = Control(np.tile(hdot, (e["grid_k"], 1)), cfg.sim["horizon"])
    sc = _sim_config(cfg)
    points, decreasing = controlled_convergence_experiment(
        coeffs, h, e["delta_list"], e["eps_rule"], sc, (e["x0"], e["y0"]), bbar)
    run.write("controlled.csv", _csv(["delta", "epsilon", "distance", "std_error"],
                                     [(p.delta, p.epsilon, p.distance, p.std_error) for p in points]))
    run.check("distances_decreasing", float(decreasing), 1.0, decreasing)


RUNNERS = {
    "simulate": run_simulate,
    "average": run_average,
    "poisson": run_poisson,
    "clt": run_clt,
    "rate": run_rate,
    "controlled": run_controlled,
    "probe": run_probe,
}


def run(subcommand, cfg, out_dir=None):
    """Execute one subcommand; returns ``(exit_status, Run)`` after writing all artifacts."""
    out_dir = out_dir or cfg.output["directory"]
    state = Run(cfg)
    error = None
    try:
        coeffs = build_model(cfg.model_name, cfg.model_params)
        RUNNERS[subcommand](coeffs, cfg, state)
    except MvscaleError as exc:
        error = {"type": type(exc).__name__, "message": str(exc)}
        trace = getattr(exc, "trace", None)
        if trace:
            state.write(f"{subcommand}_trace.csv", _csv(["rho", "iterations", "grad_norm", "energy", "residual"],
                                                        [(t["rho"], t["iterations"], t["grad_norm"], t["energy"], t["residual"]) for t in trace]))
    status = 0 if error is None and state.passed else 1

    os.makedirs(out_dir, exist_ok=True)
    state.write("summary.csv", _csv(["check", "value", "threshold", "pass"], state.checks))
    for name, text in state.files.items():
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            fh.write(text)
    manifest = {
        "version": git_version(),
        "subcommand": subcommand,
        "seed": cfg.sim["seed"],
        "config": cfg.echo(),
        "warnings": list(cfg.warnings),
        "status": "pass" if status == 0 else "fail",
        "checks": len(state.checks),
        "failed": [c[0] for c in state.checks if not c[3]],
        "error": error,
        "files": sorted(state.files),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return status, state


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="mvscale", description="Slow-fast McKean-Vlasov experiment runner.")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="override sim.seed")
        if name == "rate":
            p.add_argument("--target", type=float)
            p.add_argument("--grid-k", type=int, dest="grid_k")
            p.add_argument("--tol", type=float)
        if name == "controlled":
            p.add_argument("--delta-list", type=_float_list, dest="delta_list")
            p.add_argument("--eps-rule", dest="eps_rule")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"mvscale: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text, args.subcommand)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"mvscale: config error: {msg}", file=sys.stderr)
        return 2
    for key in ("target", "grid_k", "tol", "delta_list", "eps_rule"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.experiment[key] = val
    if args.seed is not None:
        cfg.sim["seed"] = args.seed
    for msg in cfg.warnings:
        print(f"mvscale: warning: {msg}", file=sys.stderr)
    status, state = run(args.subcommand, cfg, args.out)
    for name, value, thr, ok in state.checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  value={_fmt(value)}  threshold={_fmt(thr)}")
    out_dir = args.out or cfg.output["directory"]
    print(f"{args.subcommand}: {'pass' if status == 0 else 'fail'} -> {out_dir}")
    return status


if __name__ == "__main__":
    sys.exit(main())
