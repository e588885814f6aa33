"""Exception hierarchy shared across the package.

Each family maps onto one CLI exit code (see ``cafe_micro.cli``).
"""


class CafeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ArgumentError(CafeError, ValueError):
    exit_code = 2


class ConfigError(ArgumentError):
    pass


class DataError(CafeError, ValueError):
    exit_code = 3


class UnknownWordError(DataError, KeyError):
    def __init__(self, word: str):
        super().__init__(f"unknown word: {word!r}")
        self.word = word

    def __str__(self) -> str:
        return self.args[0]


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(CafeError):
    exit_code = 4


class NumericError(CafeError, ArithmeticError):
    exit_code = 5


class DegenerateVectorError(NumericError):
    pass


class EvaluationError(NumericError):
    pass


class ContractError(NumericError):
    """An input violated a numeric contract (e.g. rows not unit-norm)."""


class SequenceLengthError(ArgumentError):
    pass


class DivergenceError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
