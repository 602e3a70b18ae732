"""Exception types shared across the package."""


class BackrankError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(BackrankError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class DomainError(BackrankError, ValueError):
    """An argument is outside an operation's documented domain."""


class ContractError(BackrankError, RuntimeError):
    """An API was used against its stated usage contract."""


class ParseError(BackrankError, ValueError):
    """A data file is malformed.

    Carries the offending line number when one is known.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += str(path)
        if line is not None:
            prefix += f":{line}"
        super().__init__(f"{prefix}: {message}" if prefix else message)
