"""Euler-Maruyama integration of the slow-fast particle systems.

All simulators share one convention: a replica is an independent N-particle
system whose particles see the empirical measure of their own replica.
Replicas are mapped over a process pool when ``workers > 1``; every random
number is drawn from a counter-based stream keyed by
``(seed, replica, channel, component, step, particle)`` so the output does
not depend on the worker count.
"""

import csv
import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import IntegrationError, PreconditionError
from .measure import EmpiricalMeasure
from .model import check_finite
from .rng import FROZEN, INIT, W1, W2, W_HAT, NoiseStream

DIVERGENCE_BOUND = 1e8


@dataclass(frozen=True)
class SimConfig:
    epsilon: float = 0.01
    delta: float = 1.0
    dt_ratio: float = 0.05
    horizon: float = 1.0
    particles: int = 100
    replicas: int = 1
    seed: int = 0x5EED
    macro_step: float = 1e-3
    record_dt: float = 0.01
    store_paths: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PreconditionError("epsilon must be > 0")
        if not self.delta >= 0:
            raise PreconditionError("delta must be >= 0")
        if not 0 < self.dt_ratio:
            raise PreconditionError("dt_ratio must be > 0")
        if not self.horizon > 0:
            raise PreconditionError("horizon must be > 0")
        if self.particles < 1 or self.replicas < 1:
            raise PreconditionError("need particles >= 1 and replicas >= 1")
        if self.dt_ratio * self.epsilon > self.horizon:
            raise PreconditionError("micro step dt_ratio*epsilon exceeds the horizon")

    @property
    def micro_step(self):
        return self.dt_ratio * self.epsilon

    def grid(self, step):
        """Number of steps and the adjusted step that tiles [0, horizon] exactly."""
        nsteps = max(1, int(round(self.horizon / step)))
        return nsteps, self.horizon / nsteps

    def with_(self, **kw):
        return replace(self, **kw)


def default_workers():
    env = os.environ.get("MVSCALE_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class GaussianInit:
    """Independent N(mean, std^2) initial value per particle and coordinate."""

    mean: float = 0.0
    std: float = 1.0


@dataclass
class PathRecord:
    """Output of a simulator.

    times:  (K,) strictly increasing record times
    stats:  name -> (M, K) per-replica ensemble statistics at record times
    finals: name -> (M, N, dim) particle states at the final time
    sups:   name -> (M, N) per-particle supremum over the integration grid
    paths:  name -> (M, N, K, dim) particle trajectories (only if store_paths)
    """

    times: np.ndarray
    stats: dict = field(default_factory=dict)
    finals: dict = field(default_factory=dict)
    sups: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def replicas(self):
        for group in (self.stats, self.finals, self.sups):
            for v in group.values():
                return v.shape[0]
        return 0

    def pooled(self, name):
        """Final states of all particles of all replicas, shape (M*N, dim)."""
        a = self.finals[name]
        return a.reshape(-1, a.shape[-1])

    def sup_mean(self, name, power=1):
        """Mean over particles and replicas of sup^power, with the replica-level SE."""
        per_rep = np.mean(self.sups[name] ** power, axis=1)
        m = len(per_rep)
        se = float(np.std(per_rep, ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
        return float(per_rep.mean()), se

    def to_csv(self, fh=None):
        """Rows ``time,replica,statistic,value``; sup rows are stamped at the final time."""
        own = fh is None
        fh = fh or io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "replica", "statistic", "value"])
        for name in sorted(self.stats):
            arr = self.stats[name]
            for r in range(arr.shape[0]):
                for t, v in zip(self.times, arr[r]):
                    w.writerow([_fmt(t), r, name, _fmt(v)])
        tf = self.times[-1]
        for name in sorted(self.sups):
            arr = self.sups[name]
            for r in range(arr.shape[0]):
                w.writerow([_fmt(tf), r, f"sup_{name}_mean", _fmt(arr[r].mean())])
        return fh.getvalue() if own else None


def _fmt(v):
    return repr(float(v))


# ------------------------------------------------------------------ helpers


def _initial(spec, replica, n_particles, dim, seed, tag):
    if isinstance(spec, GaussianInit):
        z = NoiseStream(seed, replica, INIT).normal(tag, n_particles, dim)
        return spec.mean + spec.std * z
    a = np.asarray(spec, dtype=float)
    if a.ndim == 2:
        if a.shape != (n_particles, dim):
            raise PreconditionError(f"explicit initial states need shape {(n_particles, dim)}")
        return a.copy()
    return np.broadcast_to(np.atleast_1d(a), (n_particles, dim)).astype(float).copy()


def _split_init(init):
    if isinstance(init, tuple) and len(init) == 2:
        return init
    raise PreconditionError("init must be a pair (x0, y0)")


def _apply(mat, vec):
    # (P, a, b) x (P, b) -> (P, a); cheap paths for the common scalar case
    if mat.shape[1] == 1 and mat.shape[2] == 1:
        return mat[:, 0, :] * vec
    return np.einsum("pij,pj->pi", mat, vec)


def _check_bounds(arrays, t):
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.abs(a).max() > DIVERGENCE_BOUND:
            raise IntegrationError(f"state diverged (|state| > {DIVERGENCE_BOUND:g}) at t={t:.6g}", time=t)


def _map_replicas(fn, args_list, workers):
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=min(workers, len(args_list))) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def _record_steps(nsteps, dt, record_dt):
    stride = max(1, int(round(record_dt / dt)))
    steps = list(range(0, nsteps + 1, stride))
    if steps[-1] != nsteps:
        steps.append(nsteps)
    return steps


def _stack(results, key):
    return np.stack([r[key] for r in results])


def _assemble(results, times, meta):
    rec = PathRecord(times=np.asarray(times), meta=meta)
    for group in ("stats", "finals", "sups", "paths"):
        names = results[0][group].keys()
        getattr(rec, group).update({k: np.stack([r[group][k] for r in results]) for k in names})
    return rec


def _ensemble_stats(prefix, a, out):
    n = a.shape[1]
    for c in range(n):
        suffix = "" if n == 1 else str(c)
        out.setdefault(f"mean_{prefix}{suffix}", []).append(a[:, c].mean())
        out.setdefault(f"var_{prefix}{suffix}", []).append(a[:, c].var(ddof=1) if a.shape[0] > 1 else 0.0)


# ------------------------------------------------------ slow-fast engine


def _slowfast_replica(coeffs, cfg, init, replica, delta, control, bbar):
    """One replica of the coupled system, optionally with a control and/or an averaged twin.

    ``control`` is (edges, hdot) with piecewise-constant hdot on [edges[k], edges[k+1]).
    With a control, the recorded particles are the controlled ones, while the
    measure argument stays the law of the uncontrolled system run on the same noise.
    ``bbar`` switches on the averaged twin sharing W1 (for Z^eps).
    """
    n, m, d1, d2 = coeffs.dims
    N, eps = cfg.particles, cfg.epsilon
    nsteps, dt = cfg.grid(cfg.micro_step)
    sqdt, sqeps, sqdel = math.sqrt(dt), math.sqrt(eps), math.sqrt(delta)
    x0, y0 = _split_init(init)
    X = _initial(x0, replica, N, n, cfg.seed, 0)
    Y = _initial(y0, replica, N, m, cfg.seed, 1)
    w1 = NoiseStream(cfg.seed, replica, W1)
    w2 = NoiseStream(cfg.seed, replica, W2)

    controlled = control is not None
    if controlled:
        edges, hdot = control
        Xc, Yc = X.copy(), Y.copy()
        ctrl_gain = 1.0 / math.sqrt(delta * eps) if delta > 0 else 0.0
    coupled = bbar is not None
    if coupled:
        Xb = X.copy()
        dev2 = np.zeros(N)

    rec_steps = set(_record_steps(nsteps, dt, cfg.record_dt))
    times, stats, paths = [], {}, {}
    sup_x = np.zeros(N)
    sup_y = np.zeros(N)

    def observe(k):
        t = k * dt
        times.append(t)
        Xo = Xc if controlled else X
        _ensemble_stats("x", Xo, stats)
        if coupled:
            _ensemble_stats("z", (X - Xb) / sqeps, stats)
        if cfg.store_paths:
            paths.setdefault("x", []).append(Xo.copy())
            if coupled:
                paths.setdefault("z", []).append((X - Xb) / sqeps)
                paths.setdefault("xbar", []).append(Xb.copy())

    def track():
        Xo, Yo = (Xc, Yc) if controlled else (X, Y)
        np.maximum(sup_x, np.sqrt(np.sum(Xo**2, axis=1)), out=sup_x)
        np.maximum(sup_y, np.sqrt(np.sum(Yo**2, axis=1)), out=sup_y)

    track()
    observe(0)
    seg = 0
    for k in range(nsteps):
        t = k * dt
        mu = EmpiricalMeasure(X)
        dW1 = w1.normal(k, N, d1) * sqdt
        dW2 = w2.normal(k, N, d2) * sqdt
        if controlled:
            while seg + 1 < len(edges) - 1 and t >= edges[seg + 1] - 1e-12 * cfg.horizon:
                seg += 1
            h = hdot[seg]
            hc = np.broadcast_to(h[:d1], (N, d1))
            hf = np.broadcast_to(h[d1 : d1 + d2], (N, d2))
            sc = coeffs.sigma(Xc, mu)
            gc = coeffs.g(Xc, mu, Yc)
            Xc_new = Xc + (coeffs.b(Xc, mu, Yc) * dt + _apply(sc, hc) * dt) + sqdel * _apply(sc, dW1)
            Yc_new = Yc + (coeffs.f(Xc, mu, Yc) * (dt / eps) + _apply(gc, hf) * (ctrl_gain * dt)) + _apply(gc, dW2) / sqeps
        bx = coeffs.b(X, mu, Y)
        s = coeffs.sigma(X, mu)
        X_new = X + bx * dt + sqdel * _apply(s, dW1)
        Y = Y + coeffs.f(X, mu, Y) * (dt / eps) + _apply(coeffs.g(X, mu, Y), dW2) / sqeps
        if coupled:
            mub = EmpiricalMeasure(Xb)
            Xb = Xb + bbar(Xb, mub) * dt + sqdel * _apply(coeffs.sigma(Xb, mub), dW1)
        X = X_new
        if controlled:
            Xc, Yc = Xc_new, Yc_new
            _check_bounds((X, Y, Xc, Yc), (k + 1) * dt)
        else:
            _check_bounds((X, Y), (k + 1) * dt)
        track()
        if coupled:
            np.maximum(dev2, np.sum((X - Xb) ** 2, axis=1), out=dev2)
        if k + 1 in rec_steps:
            observe(k + 1)

    finals = {"x": (Xc if controlled else X).copy(), "y": (Yc if controlled else Y).copy()}
    sups = {"abs_x": sup_x, "abs_y": sup_y}
    if coupled:
        finals["z"] = (X - Xb) / sqeps
        finals["xbar"] = Xb.copy()
        sups["dev2"] = dev2
    return {
        "times": times,
        "stats": {k: np.asarray(v) for k, v in stats.items()},
        "finals": finals,
        "sups": sups,
        "paths": {k: np.stack(v, axis=1) for k, v in paths.items()},
    }


def _run_slowfast(coeffs, cfg, init, delta, control=None, bbar=None, kind="slowfast"):
    args = [(coeffs, cfg, init, r, delta, control, bbar) for r in range(cfg.replicas)]
    results = _map_replicas(_slowfast_replica, args, cfg.workers)
    nsteps, dt = cfg.grid(cfg.micro_step)
    meta = {"kind": kind, "micro_step": dt, "steps": nsteps, "delta": delta}
    return _assemble(results, results[0]["times"], meta)


def simulate_slowfast(coeffs, cfg, init):
    """N-particle Euler-Maruyama scheme for the coupled slow-fast system.

    Both components use the micro step ``dt_ratio * epsilon``; the fast drift is
    scaled by 1/epsilon and the fast noise by 1/sqrt(epsilon).
    """
    return _run_slowfast(coeffs, cfg, init, 1.0)


def simulate_smallnoise(coeffs, cfg, init):
    """Slow-fast system with the slow noise scaled by sqrt(cfg.delta)."""
    if not 0 < cfg.delta <= 1:
        raise PreconditionError("simulate_smallnoise needs delta in (0, 1]")
    if cfg.epsilon / cfg.delta > 0.1:
        warnings.warn(
            f"epsilon/delta = {cfg.epsilon / cfg.delta:.3g} > 0.1: scale condition epsilon/delta -> 0 is far from satisfied",
            stacklevel=2,
        )
    return _run_slowfast(coeffs, cfg, init, cfg.delta, kind="smallnoise")


def simulate_controlled(coeffs, cfg, control, init):
    """Controlled slow-fast system.

    The slow drift gains sigma P1 hdot, the fast drift gains g P2 hdot / sqrt(delta epsilon);
    coefficients are evaluated against the law of the *uncontrolled* system,
    simulated alongside on the same noise.
    """
    if not 0 < cfg.delta <= 1:
        raise PreconditionError("simulate_controlled needs delta in (0, 1]")
    edges = np.asarray(control.edges)
    if abs(edges[0]) > 1e-12 or edges[-1] < cfg.horizon - 1e-9 * cfg.horizon:
        raise PreconditionError("control grid must cover [0, horizon]")
    n, m, d1, d2 = coeffs.dims
    if control.hdot.shape[1] != d1 + d2:
        raise PreconditionError(f"control needs {d1 + d2} channels")
    return _run_slowfast(coeffs, cfg, init, cfg.delta, control=(edges, control.hdot), kind="controlled")


def coupled_deviation(coeffs, cfg, bbar_provider, init):
    """Z^eps = (X^eps - Xbar)/sqrt(eps) with Xbar driven by the same per-particle W1.

    The averaged twin is integrated on the same micro grid so the two schemes
    consume identical Brownian increments.  ``finals['z']`` holds Z^eps at the
    horizon and ``sups['dev2']`` the per-particle sup over the grid of |X^eps - Xbar|^2.
    """
    bbar = bbar_provider or coeffs.bbar
    if bbar is None:
        raise PreconditionError("coupled_deviation needs an averaged-drift provider")
    return _run_slowfast(coeffs, cfg, init, cfg.delta, bbar=bbar, kind="coupled")


# --------------------------------------------------------- averaged system


def _averaged_replica(coeffs, cfg, x0, replica, bbar):
    n, d1 = coeffs.n, coeffs.d1
    N = cfg.particles
    nsteps, dt = cfg.grid(cfg.macro_step)
    sqdt = math.sqrt(dt)
    X = _initial(x0, replica, N, n, cfg.seed, 0)
    w1 = NoiseStream(cfg.seed, replica, W1)
    rec_steps = set(_record_steps(nsteps, dt, cfg.record_dt))
    times, stats, paths = [0.0], {}, {}
    _ensemble_stats("x", X, stats)
    sup_x = np.sqrt(np.sum(X**2, axis=1))
    if cfg.store_paths:
        paths["x"] = [X.copy()]
    for k in range(nsteps):
        mu = EmpiricalMeasure(X)
        dW = w1.normal(k, N, d1) * sqdt
        X = X + check_finite(bbar(X, mu), "bbar") * dt + math.sqrt(cfg.delta) * _apply(coeffs.sigma(X, mu), dW)
        _check_bounds((X,), (k + 1) * dt)
        np.maximum(sup_x, np.sqrt(np.sum(X**2, axis=1)), out=sup_x)
        if k + 1 in rec_steps:
            times.append((k + 1) * dt)
            _ensemble_stats("x", X, stats)
            if cfg.store_paths:
                paths["x"].append(X.copy())
    return {
        "times": times,
        "stats": {k: np.asarray(v) for k, v in stats.items()},
        "finals": {"x": X},
        "sups": {"abs_x": sup_x},
        "paths": {k: np.stack(v, axis=1) for k, v in paths.items()},
    }


def simulate_averaged(coeffs, cfg, x0, bbar_provider=None):
    """McKean-Vlasov Euler scheme for the averaged equation at step ``cfg.macro_step``.

    ``cfg.delta`` scales the slow noise exactly as in the small-noise system
    (1 by default).
    """
    bbar = bbar_provider or coeffs.bbar
    if bbar is None:
        raise PreconditionError("simulate_averaged needs an averaged-drift provider")
    args = [(coeffs, cfg, x0, r, bbar) for r in range(cfg.replicas)]
    results = _map_replicas(_averaged_replica, args, cfg.workers)
    nsteps, dt = cfg.grid(cfg.macro_step)
    return _assemble(results, results[0]["times"], {"kind": "averaged", "macro_step": dt, "steps": nsteps})


# ----------------------------------------------------------- frozen equation


def iter_frozen(coeffs, x, mu, y0, step, nsteps, seed, replica=0, lanes=None, channel=FROZEN):
    """Yield the frozen fast state after each Euler step.

    ``x`` (P, n) and ``y0`` (P, m) are aligned row by row; each row is an
    independent path with its own noise lane.  Passing identical ``lanes``
    to two calls gives common random numbers.
    """
    x = np.asarray(x, dtype=float)
    Y = np.array(y0, dtype=float)
    P, d2 = Y.shape[0], coeffs.d2
    lanes = np.arange(P) if lanes is None else np.asarray(lanes)
    stream = NoiseStream(seed, replica, channel)
    sq = math.sqrt(step)
    for k in range(nsteps):
        dW = stream.normal(k, lanes, d2) * sq
        Y = Y + coeffs.f(x, mu, Y) * step + _apply(coeffs.g(x, mu, Y), dW)
        if not np.all(np.isfinite(Y)) or np.abs(Y).max() > DIVERGENCE_BOUND:
            raise IntegrationError(f"frozen path diverged at t={(k + 1) * step:.6g}", time=(k + 1) * step)
        yield Y


def simulate_frozen(coeffs, x, mu, y0, horizon, step, seed, replicas=1, record_every=1):
    """Frozen fast paths with (x, mu) held fixed.

    Returns ``(times, paths)`` with paths of shape (replicas, K, m).
    """
    m = coeffs.m
    x = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), (replicas, coeffs.n))
    y = np.broadcast_to(np.atleast_1d(np.asarray(y0, dtype=float)), (replicas, m))
    nsteps = max(1, int(round(horizon / step)))
    times, out = [0.0], [y.copy()]
    for k, Y in enumerate(iter_frozen(coeffs, x, mu, y, step, nsteps, seed), start=1):
        if k % record_every == 0 or k == nsteps:
            times.append(k * step)
            out.append(Y.copy())
    return np.asarray(times), np.stack(out, axis=1)


# ------------------------------------------------ limiting fluctuation SDE


def _fd_dx(fn, x, mu, h=1e-3):
    # central differences in each slow coordinate; returns (P, n_out, n)
    cols = []
    scale = h * (1.0 + np.abs(x))
    for c in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, c] = scale[:, c]
        cols.append((fn(x + e, mu) - fn(x - e, mu)) / (2 * scale[:, c : c + 1]))
    return np.stack(cols, axis=-1)


def lions_directional(x, mu, v, fn, point=None, direct=None, h=1e-3):
    """sum_j w_j d_mu fn(x, mu)(p_j) v_j for every row of x.

    Uses the analytic directional slot when present, else the pointwise
    Lions derivative (O(P N)), else a central difference along the lift
    mu -> law of (p_j + s v_j), which is the definition of the Lions derivative.
    """
    if direct is not None:
        return direct(x, mu, v)
    if point is not None:
        P, N = x.shape[0], mu.size
        xx = np.repeat(x, N, axis=0)
        zz = np.tile(mu.points, (P, 1))
        D = point(xx, mu, zz)
        contrib = np.einsum("q...j,qj->q...", D, np.tile(v, (P, 1)))
        return np.tensordot(mu.weights, contrib.reshape((P, N) + contrib.shape[1:]), axes=(0, 1))
    plus = EmpiricalMeasure(mu.points + h * v, mu.weights)
    minus = EmpiricalMeasure(mu.points - h * v, mu.weights)
    return (fn(x, plus) - fn(x, minus)) / (2 * h)


def constant_theta(value, n=1):
    """Theta provider returning the same PSD matrix everywhere."""
    mat = np.atleast_2d(np.asarray(value, dtype=float)).reshape(n, n)
    return _ConstantTheta(mat)


class _ConstantTheta:
    def __init__(self, mat):
        self.mat = mat

    def __call__(self, x, mu):
        return np.broadcast_to(self.mat, (x.shape[0],) + self.mat.shape)


def _limit_replica(coeffs, cfg, x0, replica, bbar, theta):
    n, d1 = coeffs.n, coeffs.d1
    N = cfg.particles
    nsteps, dt = cfg.grid(cfg.macro_step)
    sqdt = math.sqrt(dt)
    X = _initial(x0, replica, N, n, cfg.seed, 0)
    Z = np.zeros((N, n))
    w1 = NoiseStream(cfg.seed, replica, W1)
    wh = NoiseStream(cfg.seed, replica, W_HAT)
    rec_steps = set(_record_steps(nsteps, dt, cfg.record_dt))
    times, stats, paths = [0.0], {}, {}
    _ensemble_stats("z", Z, stats)
    if cfg.store_paths:
        paths["z"] = [Z.copy()]

    dx_bbar = coeffs.dx_bbar or (lambda x, mu: _fd_dx(bbar, x, mu))
    sigma_flat = lambda x, mu: coeffs.sigma(x, mu).reshape(x.shape[0], -1)  # noqa: E731
    dx_sigma = coeffs.dx_sigma or (lambda x, mu: _fd_dx(sigma_flat, x, mu).reshape(x.shape[0], n, d1, n))
    sup_z = np.zeros(N)

    for k in range(nsteps):
        mu = EmpiricalMeasure(X)
        dW = w1.normal(k, N, d1) * sqdt
        dWh = wh.normal(k, N, n) * sqdt
        drift = np.einsum("pij,pj->pi", dx_bbar(X, mu), Z)
        drift = drift + lions_directional(X, mu, Z, bbar, coeffs.dmu_bbar, coeffs.dmu_bbar_dir)
        diff = np.einsum("pikj,pj->pik", dx_sigma(X, mu), Z)
        mf = lions_directional(X, mu, Z, sigma_flat, coeffs.dmu_sigma, coeffs.dmu_sigma_dir)
        diff = diff + np.reshape(mf, (N, n, d1))
        Z = Z + drift * dt + _apply(diff, dW) + _apply(theta(X, mu), dWh)
        X = X + bbar(X, mu) * dt + _apply(coeffs.sigma(X, mu), dW)
        _check_bounds((X, Z), (k + 1) * dt)
        np.maximum(sup_z, np.sqrt(np.sum(Z**2, axis=1)), out=sup_z)
        if k + 1 in rec_steps:
            times.append((k + 1) * dt)
            _ensemble_stats("z", Z, stats)
            if cfg.store_paths:
                paths["z"].append(Z.copy())
    return {
        "times": times,
        "stats": {k: np.asarray(v) for k, v in stats.items()},
        "finals": {"z": Z, "xbar": X},
        "sups": {"abs_z": sup_z},
        "paths": {k: np.stack(v, axis=1) for k, v in paths.items()},
    }


def simulate_limit_fluctuation(coeffs, cfg, theta_provider, x0=1.0, bbar_provider=None):
    """Particle scheme for the pair (Xbar, Z) of the limiting fluctuation equation.

    Z starts at 0 and is driven by the linearised averaged dynamics, its
    mean-field (Lions derivative) terms, and an independent Brownian motion
    W_hat with diffusion Theta(Xbar, law of Xbar).
    """
    bbar = bbar_provider or coeffs.bbar
    if bbar is None:
        raise PreconditionError("simulate_limit_fluctuation needs an averaged-drift provider")
    args = [(coeffs, cfg, x0, r, bbar, theta_provider) for r in range(cfg.replicas)]
    results = _map_replicas(_limit_replica, args, cfg.workers)
    nsteps, dt = cfg.grid(cfg.macro_step)
    return _assemble(results, results[0]["times"], {"kind": "limit", "macro_step": dt, "steps": nsteps})
