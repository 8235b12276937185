"""Exception types shared across the package."""


class PhasebalError(Exception):
    """Base class for package-specific errors."""


class InvalidConfig(PhasebalError):
    """A configuration invariant is violated; the message names the first one."""


class NonPSDCorrelation(InvalidConfig):
    """Phase correlation matrix is not positive semidefinite."""


class NonpositiveNumerator(InvalidConfig):
    """s_max - s_min - 2*u_max must be positive for a usable control weight."""


class BalanceViolation(PhasebalError):
    """Per-phase power balance residual exceeds the tolerance."""


class SolverFailure(PhasebalError):
    """Per-slot solve did not produce a usable solution."""


class Nonconverged(SolverFailure):
    """Iterative solve hit its iteration cap before reaching tolerance."""

    def __init__(self, message, primal_residual=None, dual_residual=None,
                 iterations=None):
        super().__init__(message)
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        self.iterations = iterations


class NonconvergedBlock(SolverFailure):
    """A single-phase block minimization failed to reach first-order tolerance."""


class StateBoundViolation(PhasebalError):
    """Storage energy left its hard bounds; signals a controller bug."""


class ProtocolOrderViolation(PhasebalError):
    """A phase agent received a message with an out-of-order iteration index."""


class MissingUplink(PhasebalError):
    """The coordinator did not receive one uplink per phase for a round."""


class AssumptionViolation(PhasebalError):
    """Analysis helper was called outside the assumptions it needs."""
