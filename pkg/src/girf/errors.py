"""Exception types shared across the toolkit."""


class GirfError(Exception):
    """Base class for all toolkit errors."""


class NonMonotoneTimes(GirfError):
    """Observation times are not strictly increasing or precede t0."""


class ZeroSteps(GirfError):
    """Requested fewer than one intermediate step per observation interval."""


class DomainError(GirfError):
    """A parameter value violates its transform domain."""


class ModelError(GirfError):
    """A model callback failed or received inadmissible inputs."""


class NonPositiveGuide(GirfError):
    """A guide value that must be strictly positive was not."""


class NonFiniteGuide(GirfError):
    """A guide evaluation produced NaN."""


class NonFiniteState(ModelError):
    """A simulated latent state blew up past the admissible range."""


class DimensionTooSmall(ModelError):
    """The model requires a larger latent dimension."""


class CholeskyFailure(ModelError):
    """A covariance matrix that must be positive definite was not."""


class ZeroDistance(ModelError):
    """Two distinct cities were assigned zero distance."""


class MissingBirthData(ModelError):
    """The birth series does not cover a required year."""


class AllWeightsDegenerate(GirfError):
    """Every particle weight vanished at one grid step.

    Attributes
    ----------
    grid_index : int or None
        Flat grid-step index at which the filter failed.
    """

    def __init__(self, message, grid_index=None):
        super().__init__(message)
        self.grid_index = grid_index


class FilterFailure(GirfError):
    """A filtering pass aborted; carries the failing iteration context."""

    def __init__(self, message, iteration=None, cause=None):
        super().__init__(message)
        self.iteration = iteration
        self.cause = cause


class SingularInnovation(GirfError):
    """Kalman innovation covariance is singular."""


class SingularCovariance(GirfError):
    """Ensemble covariance is singular beyond repair by regularization."""


class DegenerateFit(GirfError):
    """Too few effective points for a local quadratic fit."""


class NegativeCurvature(GirfError):
    """The fitted profile is not locally concave at its maximum."""


class ConfigError(GirfError):
    """An experiment configuration is invalid.

    Attributes
    ----------
    field_path : str or None
        Dotted path of the offending field, when known.
    """

    def __init__(self, message, field_path=None):
        super().__init__(message)
        self.field_path = field_path
