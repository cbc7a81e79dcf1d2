"""Exception hierarchy shared by all mvscale modules."""


class MvscaleError(Exception):
    """Base class; every error raised on purpose by the toolkit derives from it."""


class StructuralError(MvscaleError, ValueError):
    """Shapes or dimensions do not line up."""


class ModelError(MvscaleError):
    """A coefficient evaluation returned something unusable (NaN, wrong shape)."""


class AssumptionViolation(MvscaleError):
    """A standing assumption (e.g. dissipativity of the fast drift) fails numerically."""


class IntegrationError(MvscaleError):
    """An SDE/ODE integration diverged.

    ``time`` is the first sampled time at which a state left the admissible box.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class EstimationError(MvscaleError):
    """A Monte Carlo estimate is internally inconsistent."""


class OptimizationError(MvscaleError):
    """The rate-function optimizer failed to meet its tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class PreconditionError(MvscaleError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(MvscaleError):
    """Config validation failed; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
