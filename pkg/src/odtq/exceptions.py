"""Exception hierarchy shared by every odtq module."""


class OdtqError(Exception):
    """Base class for all library errors."""


class ContractError(OdtqError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ShapeError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class ParseError(OdtqError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ValidationError(OdtqError, ValueError):
    pass


class ReachabilityError(OdtqError):
    pass


class DeadEndError(OdtqError):
    pass


class TrainingDivergenceError(OdtqError, FloatingPointError):
    pass


class InfeasibleError(OdtqError, ValueError):
    def __init__(self, message, min_alpha=None):
        self.min_alpha = min_alpha
        super().__init__(message)


class ConfigError(OdtqError, ValueError):
    pass


class DependencyError(OdtqError, FileNotFoundError):
    pass
