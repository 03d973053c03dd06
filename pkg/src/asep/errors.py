"""Exception hierarchy shared by all asep modules."""


class AsepError(Exception):
    """Base class for all errors raised by this package."""


class DenominatorAtPole(AsepError):
    """A pairwise-interaction denominator fell below its pole floor.

    Signals an inadmissible contour configuration rather than a recoverable
    numerical event: the offending radii should be reselected.
    """


class NoAdmissibleRadii(AsepError):
    """No (r, R) pair satisfies the contour admissibility constraints.

    The message names the binding constraint.
    """


class NodeBudgetExceeded(AsepError):
    """Adaptive quadrature hit its node budget before converging.

    Carries the best value obtained so far and its error estimate.
    """

    def __init__(self, message, value, error_estimate, nodes_used):
        super().__init__(message)
        self.value = value
        self.error_estimate = error_estimate
        self.nodes_used = nodes_used


class InvalidRank(AsepError):
    """Particle rank m outside its valid range (m >= 1)."""


class StateSpaceTooLarge(AsepError):
    """The exact master-equation state space exceeds the configured cap."""


class WindowTooSmall(AsepError):
    """A simulation window does not cover the light cone of the query."""


class ConfigError(AsepError):
    """Invalid or incomplete run configuration."""
