"""Exception types shared across the package."""


class DyntrajError(Exception):
    """Base class for all package errors."""


class ValidationError(DyntrajError, ValueError):
    """Input data or configuration violates a documented precondition."""


class NumericError(DyntrajError, ArithmeticError):
    """A numerical routine produced a non-finite value or failed to converge.

    ``module`` and ``op`` name where the failure happened so the CLI can
    report it without a traceback.
    """

    def __init__(self, message, module=None, op=None):
        super().__init__(message)
        self.module = module
        self.op = op

    def __str__(self):
        where = ".".join(p for p in (self.module, self.op) if p)
        base = super().__str__()
        return f"{where}: {base}" if where else base
