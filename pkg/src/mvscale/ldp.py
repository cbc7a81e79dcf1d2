"""Freidlin-Wentzell layer: skeleton equation, endpoint rate function, controlled experiments.

The skeleton ODE is

    dX^h/dt = bbar(X^h, delta_{X0(t)}) + sigma(X^h, delta_{X0(t)}) P1 hdot(t),

where X0 solves the uncontrolled averaged ODE and the measure argument is the
Dirac mass at X0(t), *not* at X^h(t).  Controls are piecewise constant on a
uniform grid; P1 picks the first d1 channels, P2 the last d2.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import IntegrationError, OptimizationError, PreconditionError
from .measure import EmpiricalMeasure
from .sim import _fd_dx, simulate_controlled, simulate_smallnoise


@dataclass
class Control:
    """Piecewise-constant hdot on K uniform intervals of [0, horizon]."""

    hdot: np.ndarray  # (K, d1 + d2)
    horizon: float = 1.0
    bound: float = None  # optional M of S_M

    def __post_init__(self):
        self.hdot = np.atleast_2d(np.asarray(self.hdot, dtype=float))

    @classmethod
    def zeros(cls, K, channels, horizon=1.0):
        return cls(np.zeros((K, channels)), horizon)

    @classmethod
    def from_function(cls, fn, K, channels, horizon=1.0):
        """Sample fn at interval midpoints; fn(t) returns a vector of length ``channels``."""
        mids = (np.arange(K) + 0.5) * horizon / K
        return cls(np.array([np.broadcast_to(fn(t), (channels,)) for t in mids]), horizon)

    @property
    def K(self):
        return self.hdot.shape[0]

    @property
    def edges(self):
        return np.linspace(0.0, self.horizon, self.K + 1)

    @property
    def dt(self):
        return self.horizon / self.K

    @property
    def energy(self):
        return 0.5 * float(np.sum(self.hdot**2)) * self.dt

    def in_sm(self, M=None):
        M = self.bound if M is None else M
        return M is None or 2 * self.energy <= M

    def path(self, t):
        """h(t) = int_0^t hdot."""
        t = np.atleast_1d(t)
        cum = np.vstack([np.zeros(self.hdot.shape[1]), np.cumsum(self.hdot * self.dt, axis=0)])
        k = np.clip((t / self.dt).astype(int), 0, self.K - 1)
        return cum[k] + (t - k * self.dt)[:, None] * self.hdot[k]


@dataclass
class RateResult:
    target: np.ndarray
    control: Control
    rate: float
    residual: float
    trace: list = field(default_factory=list)
    feasible: bool = True
    endpoint: np.ndarray = None


def _rk4(rhs, x, t, h):
    k1 = rhs(t, x)
    k2 = rhs(t + h / 2, x + h / 2 * k1)
    k3 = rhs(t + h / 2, x + h / 2 * k2)
    k4 = rhs(t + h, x + h * k3)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def averaged_ode_path(coeffs, bbar, x0, horizon, step):
    """Uncontrolled averaged ODE with the Dirac measure at the current state."""
    n = coeffs.n
    nsteps = max(1, int(math.ceil(horizon / step)))
    h = horizon / nsteps

    def rhs(t, x):
        return bbar(x, EmpiricalMeasure(x))

    x = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, n)
    out = [x[0].copy()]
    for k in range(nsteps):
        x = _rk4(rhs, x, k * h, h)
        if not np.all(np.isfinite(x)):
            raise IntegrationError("averaged ODE produced a non-finite state", time=(k + 1) * h)
        out.append(x[0].copy())
    return np.linspace(0.0, horizon, nsteps + 1), np.array(out)


class Skeleton:
    """Skeleton dynamics for a fixed model, start point and horizon.

    The reference path X0 is solved once at 10x finer step than the skeleton
    step and linearly interpolated.  Reference measures are cached per time
    since the optimizer revisits the same grid many times.
    """

    def __init__(self, coeffs, bbar_provider, x0, horizon=1.0, step=None, x0bar_path=None):
        self.coeffs = coeffs
        self.bbar = bbar_provider or coeffs.bbar
        if self.bbar is None:
            raise PreconditionError("skeleton needs an averaged-drift provider")
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(coeffs.n)
        self.horizon = float(horizon)
        self.step = step or 1e-3 * self.horizon
        if x0bar_path is None:
            x0bar_path = averaged_ode_path(coeffs, self.bbar, self.x0, self.horizon, self.step / 10)
        self.ref_t, self.ref_x = x0bar_path
        self.dx_bbar = coeffs.dx_bbar or (lambda x, mu: _fd_dx(self.bbar, x, mu))
        n, d1 = coeffs.n, coeffs.d1
        sig_flat = lambda x, mu: coeffs.sigma(x, mu).reshape(x.shape[0], -1)  # noqa: E731
        self.dx_sigma = coeffs.dx_sigma or (lambda x, mu: _fd_dx(sig_flat, x, mu).reshape(x.shape[0], n, d1, n))
        self._mu = {}

    def measure(self, t):
        key = round(t, 12)
        mu = self._mu.get(key)
        if mu is None:
            pt = [np.interp(t, self.ref_t, self.ref_x[:, i]) for i in range(self.coeffs.n)]
            mu = self._mu[key] = EmpiricalMeasure(np.array([pt]))
        return mu

    def free_endpoint(self):
        return self.ref_x[-1].copy()

    def _grid(self, K):
        sub = max(1, int(math.ceil(self.horizon / self.step / K)))
        return sub, self.horizon / (K * sub)

    def rhs(self, t, x, u):
        """Skeleton vector field; x (1, n), u (d1,) the P1 part of hdot."""
        mu = self.measure(t)
        return self.bbar(x, mu) + self.coeffs.sigma(x, mu)[:, :, :] @ u

    def solve(self, control):
        """RK4 nodes: times (K*sub+1,), states (K*sub+1, n)."""
        d1 = self.coeffs.d1
        sub, h = self._grid(control.K)
        x = self.x0[None, :].copy()
        xs = [x[0].copy()]
        step = 0
        for k in range(control.K):
            u = control.hdot[k, :d1]
            f = lambda s, y: self.rhs(s, y, u)  # noqa: E731
            for _ in range(sub):
                x = _rk4(f, x, step * h, h)
                step += 1
                if not np.all(np.isfinite(x)):
                    raise IntegrationError("skeleton produced a non-finite state", time=step * h)
                xs.append(x[0].copy())
        return np.arange(step + 1) * h, np.array(xs)

    @staticmethod
    def _hermite(xa, xb, fa, fb, h, s):
        tau = s / h
        return ((2 * tau**3 - 3 * tau**2 + 1) * xa + (tau**3 - 2 * tau**2 + tau) * h * fa
                + (-2 * tau**3 + 3 * tau**2) * xb + (tau**3 - tau**2) * h * fb)

    def adjoint(self, control, terminal, solution=None):
        """Backward costate sweep for a terminal cost with gradient ``terminal`` at X(T).

        Returns the per-interval integrals of sigma^T p, shape (K, d1): the
        gradient of the terminal cost with respect to the P1 channels.  The
        forward state between nodes is the cubic Hermite interpolant, so the
        sweep is fourth-order accurate like the forward solve.
        """
        n, d1 = self.coeffs.n, self.coeffs.d1
        sub, h = self._grid(control.K)
        times, xs = solution if solution is not None else self.solve(control)
        p = np.asarray(terminal, dtype=float).reshape(n)
        grad = np.zeros((control.K, d1))
        j = len(xs) - 1
        for k in reversed(range(control.K)):
            u = control.hdot[k, :d1]
            G = np.zeros(d1)
            for _ in range(sub):
                ta, tb = times[j - 1], times[j]
                xa, xb = xs[j - 1], xs[j]
                fa = self.rhs(ta, xa[None, :], u)[0]
                fb = self.rhs(tb, xb[None, :], u)[0]

                def back(s, y, ta=ta, tb=tb, xa=xa, xb=xb, fa=fa, fb=fb):
                    # s runs forward from 0 while physical time runs back from tb
                    t = tb - s
                    x = self._hermite(xa, xb, fa, fb, h, t - ta)[None, :]
                    mu = self.measure(t)
                    J = self.dx_bbar(x, mu)[0] + np.einsum("ikj,k->ij", self.dx_sigma(x, mu)[0], u)
                    sig = self.coeffs.sigma(x, mu)[0]
                    pp = y[:n]
                    return np.concatenate([J.T @ pp, sig.T @ pp])

                y = _rk4(back, np.concatenate([p, G]), 0.0, h)
                p, G = y[:n], y[n:]
                j -= 1
            grad[k] = G
        return grad


def solve_skeleton(coeffs, bbar_provider, x0, control, x0bar_path=None, step=None):
    """Skeleton path on the integration grid: (times, states (., n))."""
    sk = Skeleton(coeffs, bbar_provider, x0, control.horizon, step, x0bar_path)
    return sk.solve(control)


def _objective(sk, control, target, rho):
    _, xs = sk.solve(control)
    r = xs[-1] - target
    return control.energy + 0.5 * rho * float(r @ r), xs[-1]


def adjoint_gradient(coeffs, bbar_provider, x0, control, target, rho, skeleton=None):
    """Gradient of energy + (rho/2)|X^h_T - target|^2 with respect to hdot, shape (K, d1+d2)."""
    sk = skeleton or Skeleton(coeffs, bbar_provider, x0, control.horizon)
    d1 = coeffs.d1
    sol = sk.solve(control)
    terminal = rho * (sol[1][-1] - np.atleast_1d(target))
    g_pen = sk.adjoint(control, terminal, sol)
    grad = control.hdot * control.dt
    grad[:, :d1] += g_pen
    return grad


def fd_gradient(coeffs, bbar_provider, x0, control, target, rho, h=1e-6, skeleton=None):
    """Central finite-difference gradient of the penalised objective (test mode)."""
    sk = skeleton or Skeleton(coeffs, bbar_provider, x0, control.horizon)
    target = np.atleast_1d(target)
    out = np.zeros_like(control.hdot)
    for idx in np.ndindex(*control.hdot.shape):
        up, dn = control.hdot.copy(), control.hdot.copy()
        up[idx] += h
        dn[idx] -= h
        jp, _ = _objective(sk, Control(up, control.horizon), target, rho)
        jm, _ = _objective(sk, Control(dn, control.horizon), target, rho)
        out[idx] = (jp - jm) / (2 * h)
    return out


@dataclass(frozen=True)
class RateOptions:
    K: int = 32
    horizon: float = 1.0
    rho_schedule: tuple = (1e2, 1e3, 1e4, 1e5)
    tol: float = None  # default 1e-4 (1 + |target|)
    max_iter: int = 500
    step: float = None


def rate_function(coeffs, bbar_provider, x0, target, opts=RateOptions()):
    """Endpoint rate I(target) = inf { energy(h) : X^h_T = target } by penalty continuation.

    Each stage minimises energy + (rho/2)|X^h_T - target|^2 with L-BFGS driven
    by the adjoint gradient, warm-started from the previous stage.  An
    unreachable target (endpoint insensitive to every control coordinate)
    returns ``feasible=False`` and ``rate=inf``.
    """
    if opts.K < 16:
        raise PreconditionError("rate_function needs K >= 16")
    n, d1, d2 = coeffs.n, coeffs.d1, coeffs.d2
    target = np.atleast_1d(np.asarray(target, dtype=float)).reshape(n)
    tol = opts.tol if opts.tol is not None else 1e-4 * (1 + float(np.linalg.norm(target)))
    sk = Skeleton(coeffs, bbar_provider, x0, opts.horizon, opts.step)
    control = Control.zeros(opts.K, d1 + d2, opts.horizon)

    free = sk.free_endpoint()
    if np.linalg.norm(free - target) < tol:
        return RateResult(target, control, 0.0, float(np.linalg.norm(free - target)), [], True, free)

    # sensitivity of the endpoint to every control coordinate
    sol = sk.solve(control)
    sens = np.stack([sk.adjoint(control, np.eye(n)[i], sol) for i in range(n)])
    if np.max(np.abs(sens)) < 1e-12:
        return RateResult(target, control, math.inf, float(np.linalg.norm(free - target)), [], False, free)

    trace = []
    shape = control.hdot.shape
    endpoint = free
    for rho in opts.rho_schedule:

        def fun(v):
            c = Control(v.reshape(shape), opts.horizon)
            sol = sk.solve(c)
            r = sol[1][-1] - target
            g_pen = sk.adjoint(c, rho * r, sol)
            grad = c.hdot * c.dt
            grad[:, :d1] += g_pen
            return c.energy + 0.5 * rho * float(r @ r), grad.ravel()

        res = minimize(fun, control.hdot.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": opts.max_iter, "gtol": 1e-12, "ftol": 1e-15})
        control = Control(res.x.reshape(shape), opts.horizon)
        endpoint = sk.solve(control)[1][-1]
        residual = float(np.linalg.norm(endpoint - target))
        trace.append({"rho": rho, "iterations": int(res.nit), "grad_norm": float(np.linalg.norm(res.jac)),
                      "energy": control.energy, "residual": residual})
    if residual >= tol:
        raise OptimizationError(f"residual {residual:.3g} above tolerance {tol:.3g} at rho={opts.rho_schedule[-1]:g}", trace)
    return RateResult(target, control, control.energy, residual, trace, True, endpoint)


# ------------------------------------------------------------- experiments


def eps_rule_from_string(rule):
    """'square' -> eps = delta^2, 'pow:p' -> delta^p, 'ratio:c' -> c*delta."""
    rule = (rule or "square").strip()
    if rule == "square":
        return lambda d: d * d
    kind, _, val = rule.partition(":")
    if kind == "pow":
        p = float(val)
        if p <= 1:
            raise PreconditionError("eps rule pow:p needs p > 1 so that eps/delta -> 0")
        return lambda d: d**p
    if kind == "ratio":
        c = float(val)
        return lambda d: c * d
    raise PreconditionError(f"unknown eps rule {rule!r}")


@dataclass
class ControlledPoint:
    delta: float
    epsilon: float
    distance: float
    std_error: float


def controlled_convergence_experiment(coeffs, h, delta_list, eps_rule=None, cfg=None, init=(1.0, 0.0), bbar_provider=None):
    """E[sup-grid |X^{delta,eps,h} - X^h|] for each delta, with replica-level SE.

    Returns ``(points, decreasing)`` where ``decreasing`` checks that each
    distance is below its predecessor plus one SE of the predecessor.
    """
    if isinstance(eps_rule, str) or eps_rule is None:
        eps_rule = eps_rule_from_string(eps_rule)
    x0 = init[0]
    sk = Skeleton(coeffs, bbar_provider, x0, h.horizon)
    t_sk, x_sk = sk.solve(h)
    points = []
    for delta in delta_list:
        eps = float(eps_rule(delta))
        c = cfg.with_(delta=float(delta), epsilon=eps, horizon=h.horizon, store_paths=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rec = simulate_controlled(coeffs, c, h, init)
        ref = np.stack([np.interp(rec.times, t_sk, x_sk[:, i]) for i in range(coeffs.n)], axis=-1)
        diff = np.linalg.norm(rec.paths["x"] - ref[None, None], axis=-1)  # (M, N, K)
        per_rep = diff.max(axis=2).mean(axis=1)
        se = float(per_rep.std(ddof=1) / math.sqrt(per_rep.size)) if per_rep.size > 1 else 0.0
        points.append(ControlledPoint(float(delta), eps, float(per_rep.mean()), se))
    decreasing = all(b.distance < a.distance + a.std_error for a, b in zip(points, points[1:]))
    return points, decreasing


@dataclass
class RareEventPoint:
    delta: float
    epsilon: float
    probability: float
    log_rate: float  # -delta log P
    hits: int
    samples: int
    flagged: bool
    rate: float  # I at the interval end closest to the free endpoint


def naive_rare_probe(coeffs, cfg, event, delta_list, eps_rule=None, init=(1.0, 0.0), bbar_provider=None, rate_opts=RateOptions()):
    """Crude Monte Carlo of P(X_T in [lo, hi]) next to the endpoint rate (one slow dimension).

    Order-of-magnitude comparison only.  Zero hits report the bound 3/samples
    and set ``flagged``.
    """
    if coeffs.n != 1:
        raise PreconditionError("naive_rare_probe supports one slow dimension")
    if isinstance(eps_rule, str) or eps_rule is None:
        eps_rule = eps_rule_from_string(eps_rule)
    lo, hi = float(event[0]), float(event[1])
    sk = Skeleton(coeffs, bbar_provider, init[0], cfg.horizon, rate_opts.step)
    free = float(sk.free_endpoint()[0])
    if lo <= free <= hi:
        rate = 0.0
    else:
        nearest = lo if abs(lo - free) < abs(hi - free) else hi
        if math.isinf(lo) or math.isinf(hi):
            nearest = lo if math.isfinite(lo) else hi
        rate = rate_function(coeffs, bbar_provider, init[0], nearest, rate_opts.__class__(**{**rate_opts.__dict__, "horizon": cfg.horizon})).rate
    out = []
    for delta in delta_list:
        eps = float(eps_rule(delta))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rec = simulate_smallnoise(coeffs, cfg.with_(delta=float(delta), epsilon=eps), init)
        xT = rec.pooled("x")[:, 0]
        hits = int(np.count_nonzero((xT >= lo) & (xT <= hi)))
        n = xT.size
        flagged = hits == 0
        p = hits / n if hits else 3.0 / n
        out.append(RareEventPoint(float(delta), eps, p, -delta * math.log(p), hits, n, flagged, rate))
    return out
