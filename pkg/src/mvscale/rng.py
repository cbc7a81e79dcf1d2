"""Counter-based Gaussian streams.

Every normal variate is a pure function of the key tuple
``(seed, replica, channel, component, step, lane)`` where ``lane`` is
usually the particle index.  The key is folded through the SplitMix64
finalizer, the top 53 bits become a uniform on the open unit interval and
the inverse normal CDF maps it to N(0, 1).  No generator state is carried
between calls, so results do not depend on the order in which replicas or
steps are evaluated, nor on how work is split between processes.
"""

import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

DEFAULT_SEED = 0x5EED

# Channel tags.  Distinct tags give statistically independent streams.
W1 = 1  # slow Brownian motion
W2 = 2  # fast Brownian motion
W_HAT = 3  # extra Brownian motion of the limiting fluctuation equation
FROZEN = 4  # frozen-equation Brownian motion (averaging estimators)
INIT = 5  # Gaussian initial conditions
PROBE = 6  # sampling boxes of the dissipativity probe
SLICE = 7  # sliced-W2 projection directions


def mix64(z):
    """SplitMix64 finalizer on a Python int (result in [0, 2**64))."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z):
    # uint64 arithmetic wraps modulo 2**64, which is what we want
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def fold(*parts):
    """Hash an arbitrary tuple of non-negative ints into one 64-bit key."""
    h = 0
    for p in parts:
        h = mix64(h + GOLDEN * (int(p) + 1))
    return h


def uniforms_from_key(key, lanes):
    """Uniforms in (0, 1), one per lane, for a prefix key."""
    lanes = np.asarray(lanes, dtype=np.uint64)
    z = _mix64_array(lanes * np.uint64(GOLDEN) + np.uint64(key))
    z = _mix64_array(z ^ np.uint64(mix64(key ^ 0xD6E8FEB86659FD93)))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


class NoiseStream:
    """Gaussian stream for one (seed, replica, channel) triple.

    >>> s = NoiseStream(1, 0, W1)
    >>> s.normal(step=0, lanes=3, dim=1).shape
    (3, 1)
    """

    def __init__(self, seed, replica, channel):
        self.seed = int(seed) & MASK64
        self.replica = int(replica)
        self.channel = int(channel)
        self._prefix = [fold(self.seed, self.replica, self.channel, comp) for comp in range(8)]

    def _prefix_for(self, comp):
        if comp < len(self._prefix):
            return self._prefix[comp]
        return fold(self.seed, self.replica, self.channel, comp)

    def uniform(self, step, lanes, dim=1):
        lanes = np.arange(lanes) if np.isscalar(lanes) else np.asarray(lanes)
        out = np.empty((lanes.shape[0], dim))
        for comp in range(dim):
            key = mix64(self._prefix_for(comp) + GOLDEN * (int(step) + 1))
            out[:, comp] = uniforms_from_key(key, lanes)
        return out

    def normal(self, step, lanes, dim=1):
        """Standard normals of shape ``(len(lanes), dim)``; ``lanes`` may be a count."""
        return ndtri(self.uniform(step, lanes, dim))


def normals(seed, replica, channel, step, lanes, dim=1):
    return NoiseStream(seed, replica, channel).normal(step, lanes, dim)
