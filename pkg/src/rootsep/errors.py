"""Semantic exception hierarchy.

Validation problems (bad inputs, bad config) and numerical check failures
(scheme diagnostics out of tolerance) are kept separate so the CLI can map
them to distinct exit codes.
"""


class RootSepError(Exception):
    """Base class for all package errors."""


class ValidationError(RootSepError):
    """Bad input: domain violations, malformed files, bad config."""


class ConfigError(ValidationError):
    """Malformed or inconsistent run configuration."""


class ConvexOrderError(ValidationError):
    """Marginal family is not non-decreasing in convex order."""


class SingularityError(ValidationError):
    """Requested derivative does not exist at the evaluation point."""


class CheckError(RootSepError):
    """A numerical verification failed beyond its tolerance."""


class ExtractionUnstableError(CheckError):
    """Barrier extraction produced too many non-monotone nodes."""


class HorizonError(CheckError):
    """Too many simulated paths were censored by the time horizon."""


class NonConvergenceError(CheckError):
    """Refinement levels stopped contracting."""


class GridBudgetError(ValidationError):
    """Requested grid exceeds the configured node budget."""
