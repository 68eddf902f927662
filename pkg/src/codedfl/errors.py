"""Exception types shared across the package."""


class CodedFLError(Exception):
    pass


class SpecMismatchError(CodedFLError, ValueError):
    """Operands carry different fixed-point formats."""


class DimensionError(CodedFLError, ValueError):
    pass


class SingularSystemError(CodedFLError, ArithmeticError):
    pass


class InsufficientDevicesError(CodedFLError, ValueError):
    pass


class ResidualToleranceError(CodedFLError, ArithmeticError):
    pass


class FormatError(CodedFLError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionMismatchError(FormatError):
    pass


class ConfigError(CodedFLError, ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
