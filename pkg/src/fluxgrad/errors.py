"""Exception hierarchy.

Two families matter to callers: :class:`ModelError` (bad input, CLI exit
code 2) and :class:`NumericalError` (a computation could not be carried
out, CLI exit code 3).
"""


class FluxgradError(Exception):
    """Base class for all package errors."""


class ModelError(FluxgradError):
    """Invalid user input (model file, configuration, arguments)."""


class ParseError(ModelError):
    """A model or point file is not valid JSON."""

    def __init__(self, message, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}:{column}"
            where += ": "
        super().__init__(where + message)


class ValidationError(ModelError):
    """A model violates the schema or its invariants.

    ``violations`` lists every problem found, not just the first one.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NumericalError(FluxgradError):
    """A numerical procedure failed or its preconditions do not hold."""


class NotDetailedBalanced(NumericalError):
    pass


class InsufficientParticles(NumericalError):
    pass


class ExplosionGuard(NumericalError):
    """Event cap exceeded in a stochastic simulation."""


class ToleranceFailure(NumericalError):
    """ODE step size underflow."""


class InfeasibleState(NumericalError):
    """The continuity map sends the flux outside the nonnegative orthant."""


class InfeasibleConstraint(NumericalError):
    pass


class NonConvexityDetected(NumericalError):
    pass


class NotSolvable(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class StabilityViolation(NumericalError):
    pass


class InvalidConcentration(ModelError, ValueError):
    """A concentration vector has negative or non-finite entries."""
