"""Exception types raised across the toolkit."""


class DebtCeilingError(Exception):
    """Base class for all toolkit errors."""


class ModelValidationError(DebtCeilingError):
    """Parameter set violates a structural requirement."""


class NonConservativeGenerator(ModelValidationError):
    """A generator-matrix row does not sum to zero (or has negative off-diagonals)."""


class DiscountTooSmall(ModelValidationError):
    """Discount rate does not exceed the two-regime admissibility floor."""


class NonConvexCost(ModelValidationError):
    """Holding-cost function fails convexity, monotonicity, or growth checks."""


class NotTwoRegime(DebtCeilingError):
    """Operation requires the two-regime diffusive-indicator setting."""


class DegenerateSigma2(DebtCeilingError):
    """Indicator idiosyncratic volatility is non-positive at the requested point."""


class DegenerateTheta(DebtCeilingError):
    """Belief signal strength is zero; the observation carries no regime information."""


class StepTooCoarse(DebtCeilingError):
    """Time step too large for the drift scale (dt * max|beta| > 0.1)."""


class UnmatchableJump(DebtCeilingError):
    """Observed jump mark matches no regime's jump-size function."""


class WeightCollapse(DebtCeilingError):
    """All particle weights underflowed to zero."""


class ResolutionTooCoarse(DebtCeilingError):
    """Grid has fewer than the minimum number of nodes per axis."""


class NoConvergence(DebtCeilingError):
    """Iterative solver failed to converge within the sweep budget."""

    def __init__(self, message, worst_residual=None, sweeps=None):
        super().__init__(message)
        self.worst_residual = worst_residual
        self.sweeps = sweeps


class NoRoot(DebtCeilingError):
    """Smooth-fit system for a one-dimensional threshold has no positive solution."""


class BoundaryNotFound(DebtCeilingError):
    """A belief column of the value surface contains no stopping node."""
