"""Monte Carlo estimators built on the frozen fast equation.

Everything here runs the frozen dynamics dY = f(x, mu, Y) dt + g(x, mu, Y) dW
with (x, mu) held fixed, vectorised over replicas:

* ``sample_invariant`` pools decorrelated states after a burn-in,
* ``estimate_bbar`` averages b over that pool,
* ``estimate_phi`` integrates the centered drift along paths started at y,
  which is the representation of the Poisson solution as a time integral,
* ``estimate_dphi_dy`` differentiates that with common random numbers,
* ``estimate_theta`` forms the PSD square root of the invariant average of
  (dPhi/dy g)(dPhi/dy g)^T.

Default horizons are tied to the dissipativity margin gamma returned by
:func:`mvscale.model.dissipativity_probe`: burn-in 10/gamma, pool spacing
1/gamma, Poisson truncation 12/gamma.
"""

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import AssumptionViolation, EstimationError
from .measure import EmpiricalMeasure
from .model import check_finite, dissipativity_probe
from .sim import iter_frozen


@dataclass(frozen=True)
class AveragingOptions:
    burn_in: Optional[float] = None  # default 10/gamma
    horizon: Optional[float] = None  # sampling window after burn-in, default 20/gamma
    spacing: Optional[float] = None  # default 1/gamma
    step: Optional[float] = None  # default 0.01/gamma
    replicas: int = 200
    seed: int = 0x5EED
    gamma: Optional[float] = None  # probed when absent
    phi_horizon: Optional[float] = None  # default 12/gamma
    phi_replicas: Optional[int] = None  # default: replicas
    fd_step: Optional[float] = None  # default 1e-2 (1 + |y|)
    theta_samples: int = 64
    theta_batches: int = 8
    y0: Optional[np.ndarray] = None  # start of the invariant-sampling paths, default 0

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class AveragedField:
    value: np.ndarray
    std_error: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.std_error = np.asarray(self.std_error, dtype=float)
        if not np.all(np.isfinite(self.std_error)) or np.any(self.std_error < 0):
            raise EstimationError("standard error must be finite and nonnegative")


def _resolve(coeffs, opts):
    gamma = opts.gamma
    if gamma is None:
        gamma = dissipativity_probe(coeffs, 1000, seed=opts.seed)
    if not gamma > 0:
        raise AssumptionViolation(f"fast drift is not dissipative on the probed box (gamma_est={gamma:.4g})")
    step = opts.step if opts.step is not None else 0.01 / gamma
    if step >= 2.0 / gamma:
        raise AssumptionViolation(f"frozen step {step} is not below the stability bound 2/gamma={2 / gamma:.4g}")
    return {
        "gamma": gamma,
        "step": step,
        "burn_in": opts.burn_in if opts.burn_in is not None else 10.0 / gamma,
        "horizon": opts.horizon if opts.horizon is not None else 20.0 / gamma,
        "spacing": opts.spacing if opts.spacing is not None else 1.0 / gamma,
        "phi_horizon": opts.phi_horizon if opts.phi_horizon is not None else 12.0 / gamma,
    }


def _as_point(x, n):
    return np.atleast_1d(np.asarray(x, dtype=float)).reshape(n)


def _pool(coeffs, X, mu, opts, res, lane_offset=0):
    """Pooled invariant samples for each row of X: array (P, R, S, m)."""
    P, R, m = X.shape[0], opts.replicas, coeffs.m
    step = res["step"]
    n_burn = int(math.ceil(res["burn_in"] / step))
    stride = max(1, int(round(res["spacing"] / step)))
    n_keep = max(1, int(res["horizon"] / (stride * step)))
    xs = np.repeat(X, R, axis=0)
    y0 = np.zeros(m) if opts.y0 is None else np.asarray(opts.y0, dtype=float).reshape(m)
    ys = np.broadcast_to(y0, (P * R, m))
    lanes = lane_offset + np.arange(P * R)
    kept = []
    total = n_burn + n_keep * stride
    for k, Y in enumerate(iter_frozen(coeffs, xs, mu, ys, step, total, opts.seed, lanes=lanes), start=1):
        if k > n_burn and (k - n_burn) % stride == 0:
            kept.append(Y.copy())
    return np.stack(kept, axis=1).reshape(P, R, n_keep, m)


def sample_invariant(coeffs, x, mu, opts=AveragingOptions()):
    """Empirical approximation of the invariant law of the frozen equation at (x, mu)."""
    res = _resolve(coeffs, opts)
    X = _as_point(x, coeffs.n)[None, :]
    pool = _pool(coeffs, X, mu, opts, res)[0]
    return EmpiricalMeasure(pool.reshape(-1, coeffs.m))


def _bbar_from_pool(coeffs, X, mu, pool):
    # pool (P, R, S, m) -> per-replica means of b, shape (P, R, n)
    P, R, S, m = pool.shape
    xs = np.repeat(X, R * S, axis=0)
    vals = check_finite(coeffs.b(xs, mu, pool.reshape(-1, m)), "b")
    return vals.reshape(P, R, S, -1).mean(axis=2)


def estimate_bbar(coeffs, x, mu, opts=AveragingOptions()):
    """b averaged over the pooled invariant samples; SE from replica means."""
    res = _resolve(coeffs, opts)
    X = _as_point(x, coeffs.n)[None, :]
    per_rep = _bbar_from_pool(coeffs, X, mu, _pool(coeffs, X, mu, opts, res))[0]
    R = per_rep.shape[0]
    se = per_rep.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(per_rep.shape[1])
    return AveragedField(per_rep.mean(axis=0), se, {**res, "replicas": R, "pool": R * opts.replicas})


def _bbar_value(coeffs, bbar_provider, x, mu, opts):
    if bbar_provider is None:
        bbar_provider = coeffs.bbar
    if bbar_provider is None:
        return estimate_bbar(coeffs, x, mu, opts).value
    return np.asarray(bbar_provider(np.atleast_2d(x), mu), dtype=float).reshape(-1)


def _phi_integrals(coeffs, x, mu, Ys, bbar, opts, res, lanes):
    """Trapezoidal integrals of b(x, mu, Y_s) - bbar along frozen paths.

    Ys (L, m) are the starting points (one path each); returns the per-path
    integrals (L, n) and the per-path integral over the last decile.
    """
    step = res["step"]
    nsteps = max(10, int(round(res["phi_horizon"] / step)))
    L = Ys.shape[0]
    xs = np.broadcast_to(x, (L, coeffs.n))
    c0 = coeffs.b(xs, mu, Ys) - bbar
    acc = 0.5 * c0
    tail_start = int(round(0.9 * nsteps))
    tail = np.zeros_like(c0)
    prev = c0
    for k, Y in enumerate(iter_frozen(coeffs, xs, mu, Ys, step, nsteps, opts.seed, lanes=lanes), start=1):
        c = check_finite(coeffs.b(xs, mu, Y), "b") - bbar
        w = 0.5 if k == nsteps else 1.0
        acc = acc + w * c
        if k > tail_start:
            tail = tail + 0.5 * (prev + c)
        prev = c
    return acc * step, tail * step, nsteps * step


def estimate_phi(coeffs, bbar_provider, x, mu, y, opts=AveragingOptions()):
    """Poisson solution at (x, mu, y) as a truncated time integral of the centered drift.

    ``meta['tail']`` is the last-decile contribution of the replica-averaged
    integrand; a warning is issued when it exceeds 3 standard errors.
    """
    res = _resolve(coeffs, opts)
    x = _as_point(x, coeffs.n)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(coeffs.m)
    R = opts.phi_replicas or opts.replicas
    bbar = _bbar_value(coeffs, bbar_provider, x, mu, opts)
    ints, tails, horizon = _phi_integrals(coeffs, x, mu, np.broadcast_to(y, (R, coeffs.m)), bbar, opts, res, np.arange(R))
    value = ints.mean(axis=0)
    se = ints.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(value)
    tail = np.abs(tails.mean(axis=0))
    warn = bool(np.any(tail > 3 * se))
    if warn:
        warnings.warn(f"Poisson integral truncated at T={horizon:.3g}: tail {tail} exceeds 3 SE {3 * se}", stacklevel=2)
    return AveragedField(value, se, {**res, "phi_horizon": horizon, "tail": tail, "tail_warning": warn, "replicas": R})


def _dphi_paths(coeffs, x, mu, Ys, bbar, opts, res, R):
    """Per-path CRN central differences of Phi in each fast coordinate.

    Ys (S, m); returns (S, R, n, m).
    """
    S, m = Ys.shape
    lanes = np.arange(S * R)
    base = np.repeat(Ys, R, axis=0)
    if opts.fd_step is not None:
        hs = np.full(S * R, opts.fd_step)
    else:
        hs = 1e-2 * (1.0 + np.linalg.norm(base, axis=1))
    out = np.empty((S, R, coeffs.n, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        starts = np.concatenate([base + hs[:, None] * e, base - hs[:, None] * e])
        ints, _, _ = _phi_integrals(coeffs, x, mu, starts, bbar, opts, res, np.concatenate([lanes, lanes]))
        d = (ints[: S * R] - ints[S * R :]) / (2 * hs[:, None])
        out[:, :, :, j] = d.reshape(S, R, coeffs.n)
    return out


def estimate_dphi_dy(coeffs, bbar_provider, x, mu, y, opts=AveragingOptions()):
    """Central difference of the Poisson solution in y with common random numbers."""
    res = _resolve(coeffs, opts)
    x = _as_point(x, coeffs.n)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, coeffs.m)
    R = opts.phi_replicas or opts.replicas
    bbar = _bbar_value(coeffs, bbar_provider, x, mu, opts)
    d = _dphi_paths(coeffs, x, mu, y, bbar, opts, res, R)[0]
    value = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(value)
    return AveragedField(value, se, {**res, "replicas": R})


def psd_sqrt(A, warn_tol=1e-8, fail_tol=1e-6):
    """Symmetric PSD square root after symmetrising and clipping small negative eigenvalues."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    scale = max(float(np.trace(A)), 0.0)
    if w.min() < -fail_tol * scale or (scale == 0.0 and w.min() < 0):
        raise EstimationError(f"matrix is not PSD: min eigenvalue {w.min():.3g}, trace {scale:.3g}")
    if w.min() < -warn_tol * scale:
        warnings.warn(f"clipping eigenvalue {w.min():.3g} to 0", stacklevel=2)
    w = np.clip(w, 0.0, None)
    root = (V * np.sqrt(w)) @ V.T
    return 0.5 * (root + root.T)


def estimate_theta(coeffs, x, mu, opts=AveragingOptions(), bbar_provider=None):
    """Theta(x, mu): PSD root of the invariant average of (dPhi/dy g)(dPhi/dy g)^T.

    ``theta_samples`` fast states are drawn from the pooled invariant sample;
    the SE is the spread of the root over ``theta_batches`` disjoint batches.
    """
    res = _resolve(coeffs, opts)
    n, m = coeffs.n, coeffs.m
    x = _as_point(x, n)
    pool = sample_invariant(coeffs, x, mu, opts).points
    S = min(opts.theta_samples, pool.shape[0])
    idx = np.linspace(0, pool.shape[0] - 1, S).round().astype(int)
    Ys = pool[idx]
    bbar = _bbar_value(coeffs, bbar_provider, x, mu, opts)
    R = opts.phi_replicas or opts.replicas
    dphi = _dphi_paths(coeffs, x, mu, Ys, bbar, opts, res, R).mean(axis=1)  # (S, n, m)
    G = coeffs.g(np.broadcast_to(x, (S, n)), mu, Ys)  # (S, m, d2)
    B = np.einsum("sij,sjk->sik", dphi, G)
    outer = np.einsum("sik,sjk->sij", B, B)
    value = psd_sqrt(outer.mean(axis=0))
    nb = max(2, min(opts.theta_batches, S))
    roots = [psd_sqrt(chunk.mean(axis=0)) for chunk in np.array_split(outer, nb)]
    se = np.std(roots, axis=0, ddof=1) / math.sqrt(nb)
    return AveragedField(value, se, {**res, "samples": S, "replicas": R})


# -------------------------------------------------- providers for simulators


class EstimatedBbar:
    """Averaged-drift provider that estimates b-bar on the fly for every particle.

    Each call runs short frozen bursts for all rows of x at once (heterogeneous
    multiscale style).  The noise is keyed by ``opts.seed`` so repeated calls
    use common random numbers, which keeps finite differences of the provider
    smooth.
    """

    def __init__(self, coeffs, opts=None):
        opts = opts or AveragingOptions(replicas=16)
        self.coeffs = coeffs
        self.opts = opts
        self.res = _resolve(coeffs, opts)
        if opts.horizon is None:
            self.res["horizon"] = 5.0 / self.res["gamma"]
        if opts.burn_in is None:
            self.res["burn_in"] = 5.0 / self.res["gamma"]

    def __call__(self, x, mu):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        pool = _pool(self.coeffs, X, mu, self.opts, self.res)
        return _bbar_from_pool(self.coeffs, X, mu, pool).mean(axis=1)


class EstimatedTheta:
    """Theta provider for models without a closed form (one slow dimension).

    Theta is estimated at ``nodes`` quantiles of the particle cloud and
    linearly interpolated; estimates are reused for ``refresh`` consecutive
    calls.  Intended for qualitative runs.
    """

    def __init__(self, coeffs, opts=None, nodes=5, refresh=50, bbar_provider=None):
        if coeffs.n != 1:
            raise AssumptionViolation("EstimatedTheta supports one slow dimension")
        self.coeffs = coeffs
        self.opts = opts or AveragingOptions(replicas=32, theta_samples=16, theta_batches=4)
        self.nodes = nodes
        self.refresh = refresh
        self.bbar_provider = bbar_provider
        self._calls = 0
        self._table = None

    def __call__(self, x, mu):
        if self._table is None or self._calls % self.refresh == 0:
            qs = np.unique(np.quantile(mu.points[:, 0], np.linspace(0, 1, self.nodes)))
            vals = [estimate_theta(self.coeffs, q, mu, self.opts, self.bbar_provider).value[0, 0] for q in qs]
            self._table = (qs, np.asarray(vals))
        self._calls += 1
        qs, vals = self._table
        th = np.interp(x[:, 0], qs, vals) if qs.size > 1 else np.full(x.shape[0], vals[0])
        return th[:, None, None]
