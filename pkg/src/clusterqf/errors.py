"""Exception and warning types shared across the package."""

from __future__ import annotations


class ClusterQFError(Exception):
    """Base class for all package errors."""


class ValidationError(ClusterQFError):
    """Malformed input data (ragged rows, missing columns, empty input)."""


class RankDeficientError(ClusterQFError):
    """A Gram or inner matrix is numerically rank deficient."""


class SingularLeaveOutError(ClusterQFError):
    """A leave-out block was singular and strict mode forbids regularizing."""


class TooFewClustersError(ClusterQFError):
    """The requested estimator needs more clusters than the design has."""


class SizeLimitError(ClusterQFError):
    """A reference-only routine was called beyond its supported size."""


class TooLargeError(ClusterQFError):
    """The Khatri-Rao correction system exceeds the configured size budget."""


class DoesNotExistError(ClusterQFError):
    """The Khatri-Rao bias correction does not exist (singular system)."""


class NotPSDError(ClusterQFError):
    """A covariance matrix is not positive semidefinite."""


class DivideByZeroError(ClusterQFError):
    """A ratio estimator has an exactly zero denominator."""


class ClusterQFWarning(UserWarning):
    """Base class for package warnings."""


class DesignWarning(ClusterQFWarning):
    """Suspicious but workable design matrix (e.g. an all-zero column)."""


class DegenerateClusterWarning(ClusterQFWarning):
    """Too few clusters for the asymptotics the estimator relies on."""


class WeakIdentificationWarning(ClusterQFWarning):
    """The denominator of a ratio estimator is small relative to its noise."""


class RegularizedSolveWarning(ClusterQFWarning):
    """One or more ridge-guarded solves engaged the regularization path."""
