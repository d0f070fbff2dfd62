"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when user-supplied data violates a documented precondition."""


class ScenarioValidationError(InvalidInputError):
    """Raised when a scenario file fails validation; carries the issue list."""

    def __init__(self, issues):
        self.issues = list(issues)
        lines = "; ".join(str(i) for i in self.issues)
        super().__init__(f"scenario validation failed: {lines}")


class SolverFailureError(RuntimeError):
    """An inner QP solve did not reach an acceptable status."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class CapUnattainableError(RuntimeError):
    """Bisection on the cost-cap multiplier found no feasible bracket."""


class InstanceTooLargeError(InvalidInputError):
    """Exhaustive enumeration refused because the binary space is too big."""


class ProtocolError(RuntimeError):
    """A consensus round observed a missing or out-of-order message."""


class InternalError(RuntimeError):
    """A situation the math rules out; indicates a bug, not bad input."""
