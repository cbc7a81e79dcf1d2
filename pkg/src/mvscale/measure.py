"""Empirical probability measures on R^n with moments and W2 distances."""

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .rng import SLICE, normals


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point cloud ``sum_i w_i delta_{p_i}``.

    ``points`` has shape (N, n); ``weights`` has shape (N,) and sums to one.
    Passing ``weights=None`` gives the uniform measure, which is what the
    particle systems use and skips the normalisation check.
    """

    points: np.ndarray
    weights: np.ndarray = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] < 1 or pts.shape[0] < 1:
            raise StructuralError(f"points must have shape (N, n), got {np.shape(self.points)}")
        object.__setattr__(self, "points", pts)
        if self.weights is None:
            object.__setattr__(self, "weights", np.full(pts.shape[0], 1.0 / pts.shape[0]))
            self._cache["uniform"] = True
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[0],):
                raise StructuralError("weights must have one entry per point")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise StructuralError("weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)
            self._cache["uniform"] = bool(np.all(w == w[0]))
        if not np.all(np.isfinite(pts)):
            raise StructuralError("points must be finite")

    @classmethod
    def dirac(cls, point):
        return cls(np.atleast_2d(np.asarray(point, dtype=float)))

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def is_uniform(self):
        return self._cache["uniform"]

    def mean(self):
        """Weighted mean, cached since coefficients query it repeatedly."""
        if "mean" not in self._cache:
            if self.is_uniform:
                self._cache["mean"] = self.points.mean(axis=0)
            else:
                self._cache["mean"] = self.weights @ self.points
        return self._cache["mean"]

    def expect(self, fn):
        """Integral of ``fn`` (vectorised over rows) against the measure."""
        vals = np.asarray(fn(self.points), dtype=float)
        return np.tensordot(self.weights, vals, axes=(0, 0))

    def second_moment(self):
        """mu(|.|^2)."""
        if "m2" not in self._cache:
            self._cache["m2"] = float(self.weights @ np.sum(self.points**2, axis=1))
        return self._cache["m2"]

    def shifted(self, c):
        return EmpiricalMeasure(self.points + np.asarray(c, dtype=float), self.weights)


def moment(mu, k):
    """Raw k-th moment of each coordinate."""
    if not 1 <= int(k) <= 8:
        raise ValueError("moment order must be in 1..8")
    return mu.weights @ mu.points ** int(k)


def _w2_1d_sorted(a, b):
    return np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2))


def _w2_1d_quantile(a, wa, b, wb):
    # Integrate |F^-1(t) - G^-1(t)|^2 over the merged breakpoints of both CDFs.
    ia, ib = np.argsort(a, kind="stable"), np.argsort(b, kind="stable")
    a, wa, b, wb = a[ia], wa[ia], b[ib], wb[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    t = np.union1d(ca, cb)
    widths = np.diff(np.concatenate(([0.0], t)))
    mids = t - widths / 2
    qa = a[np.minimum(np.searchsorted(ca, mids), a.size - 1)]
    qb = b[np.minimum(np.searchsorted(cb, mids), b.size - 1)]
    return np.sqrt(max(float(np.sum(widths * (qa - qb) ** 2)), 0.0))


def _w2_1d(mu, nu, xa, xb):
    if mu.is_uniform and nu.is_uniform and mu.size == nu.size:
        return float(_w2_1d_sorted(xa, xb))
    return _w2_1d_quantile(xa, mu.weights, xb, nu.weights)


def w2(mu, nu, projections=64, seed=0):
    """Wasserstein-2 distance.

    Exact in one dimension (quantile coupling).  In higher dimension a sliced
    estimate over ``projections`` seeded unit directions is returned; it is a
    diagnostic, not the true W2.
    """
    if mu.dim != nu.dim:
        raise StructuralError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return _w2_1d(mu, nu, mu.points[:, 0], nu.points[:, 0])
    dirs = normals(seed, 0, SLICE, 0, projections, mu.dim)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sq = [_w2_1d(mu, nu, mu.points @ d, nu.points @ d) ** 2 for d in dirs]
    return float(np.sqrt(np.mean(sq)))
