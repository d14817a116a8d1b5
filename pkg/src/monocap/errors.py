"""Exception types shared across modules; the CLI maps them to exit codes."""


class MonocapError(Exception):
    """Base class."""


class PreconditionError(MonocapError, ValueError):
    """Inputs violate an operation's preconditions."""


class BudgetExceeded(PreconditionError):
    """A builder would exceed the configured vertex budget."""


class SolverError(MonocapError, RuntimeError):
    """A numerical solver failed to converge."""
