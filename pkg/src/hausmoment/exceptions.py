"""Exception hierarchy shared by all modules."""


class HausmomentError(Exception):
    """Base class for all package errors."""


class ModelError(HausmomentError):
    """Invalid model definition or inconsistent dimensions."""


class EvaluationError(ModelError):
    """A moment function returned non-finite values."""


class RankDeficientConstraint(ModelError):
    """The constraint matrix H has rank below r."""


class MaxIterationsExceeded(ModelError):
    """Newton solve for beta did not converge."""


class SingularJacobian(ModelError):
    """E_theta(dg/dbeta') is numerically singular."""


class MultipleRootsError(ModelError):
    """Distinct roots of the moment equations were found for one theta."""


class OffSupport(HausmomentError):
    """Point lies outside the support of a singular Gaussian."""


class SamplerAbort(HausmomentError):
    """Too many failed proposals; the chain was stopped."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(HausmomentError):
    """Malformed experiment configuration."""


class SingularExpectedJacobian(SingularJacobian):
    """E_theta(dg/dbeta') is singular where a Jacobian bundle is requested."""
