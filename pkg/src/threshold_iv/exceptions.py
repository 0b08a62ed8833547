"""Exception hierarchy for threshold_iv."""

from __future__ import annotations


class ThresholdIVError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ThresholdIVError):
    """Input file could not be parsed (bad CSV cell, missing header, ...)."""


class ConfigError(ThresholdIVError):
    """Inconsistent or unresolvable run configuration."""


class EstimationError(ThresholdIVError):
    """Base class for numerical/statistical estimation failures."""


class DegenerateThresholdVariable(EstimationError):
    """The threshold variable has no variation, so no split exists."""


class EmptyGrid(EstimationError):
    """No candidate thresholds survive the trimming band."""


class RegimeTooSmall(EstimationError):
    """A candidate split leaves one regime with too few observations."""


class SingularDesign(EstimationError):
    """A design/moment matrix is singular to working tolerance.

    Carries the condition-number estimate that triggered the failure.
    """

    def __init__(self, message: str, cond: float | None = None):
        if cond is not None:
            message = f"{message} (condition estimate {cond:.3e})"
        super().__init__(message)
        self.cond = cond


class SingularWeight(EstimationError):
    """A GMM weight matrix is not symmetric positive definite."""


class BranchMismatch(EstimationError):
    """Partition inconsistent with the gamma-versus-rho branch requested."""


class AllCandidatesFailed(EstimationError):
    """Every grid candidate was skipped; no sup statistic exists."""


class BootstrapUnstable(EstimationError):
    """Too many bootstrap replicates failed for the run to be trusted."""


class NumericalRidgeWarning(RuntimeWarning):
    """A variance matrix needed a one-shot diagonal ridge to become PD."""
