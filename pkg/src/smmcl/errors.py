"""Exception hierarchy shared by every module of the package."""


class SmmclError(Exception):
    """Base class for all library errors."""


class InvalidInputError(SmmclError, ValueError):
    pass


class InvalidLabelError(SmmclError, ValueError):
    pass


class InvalidConfigError(SmmclError, ValueError):
    pass


class StructuralError(SmmclError, ValueError):
    """Parameter layouts or class bookkeeping do not line up."""


class NumericError(SmmclError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, iteration: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class DegenerateImprintError(SmmclError, ValueError):
    pass


class StreamIntegrityError(SmmclError, ValueError):
    pass


class ParseError(SmmclError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
