"""Exception hierarchy shared across the package."""


class NPGNNError(Exception):
    """Base class for all package errors."""


class InputError(NPGNNError, ValueError):
    """Invalid argument values (out-of-range indices, infeasible quotas, ...)."""


class ShapeError(NPGNNError, ValueError):
    pass


class DomainError(NPGNNError, ValueError):
    pass


class NumericError(NPGNNError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class ContractError(NPGNNError, RuntimeError):
    pass


class ParseError(NPGNNError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class FormatError(NPGNNError, ValueError):
    pass


class SchemaError(NPGNNError, ValueError):
    """Persisted artifact has an unknown or mismatched schema version."""
