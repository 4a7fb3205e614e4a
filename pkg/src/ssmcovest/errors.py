"""Exception hierarchy shared across the package."""


class SsmCovEstError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(SsmCovEstError):
    """Operands have incompatible shapes."""


class DimensionTooSmall(SsmCovEstError):
    """State dimension below the minimum the operation supports."""


class NotPositiveDefinite(SsmCovEstError):
    """Cholesky factorization failed: the matrix is not positive definite."""


class ZeroNorm(SsmCovEstError):
    """A relative difference was requested against a zero-norm reference."""


class AllWeightsZero(SsmCovEstError):
    """Every particle likelihood underflowed; the filter has diverged."""


class NonFiniteState(SsmCovEstError):
    """A particle became NaN/Inf during assimilation (step size too large)."""


class NonFinite(SsmCovEstError):
    """A numerical reduction produced a non-finite value."""


class SingularInnovationCovariance(SsmCovEstError):
    """The innovation covariance of a Kalman-type update is singular."""


class DegenerateResiduals(SsmCovEstError):
    """The covariance update collapsed to a non-positive-definite matrix."""


class ConfigError(SsmCovEstError):
    """An experiment configuration file failed to parse or validate."""


class EstimationError(SsmCovEstError):
    """A filter failure inside the EM loop, annotated with its location.

    Attributes
    ----------
    em_iteration : int
        EM iteration (1-based) in which the failure occurred.
    fp_iteration : int
        Fixed-point iteration within the M-step, 0 for the E-step pass.
    cycle : int or None
        Assimilation cycle of the failing filter step, if known.
    """

    def __init__(self, message, em_iteration, fp_iteration, cycle=None):
        super().__init__(message)
        self.em_iteration = em_iteration
        self.fp_iteration = fp_iteration
        self.cycle = cycle
