"""Exception types shared across the toolkit."""


class DelaympError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DelaympError):
    """Invalid grid, problem, or experiment parameters."""


class EvaluationError(DelaympError):
    """A coefficient evaluator produced a non-finite value."""


class SimulationError(DelaympError):
    """A simulated path became non-finite."""


class SolverError(DelaympError):
    """A backward solve failed (singular regression, guard violation)."""


class DomainError(DelaympError):
    """A control value lies outside the control domain."""


class StructureError(DelaympError):
    """A declared structural property of the problem does not hold."""


class OracleError(DelaympError):
    """A reference solution could not be produced for the given parameters."""
