# -*- coding: utf-8 -*-


class ChainflowException(Exception):
    """
    Base class for all errors raised by chainflow.
    """

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return str(self.message)


class InvalidArgumentError(ChainflowException):
    """An argument violates a documented precondition."""


class ShapeError(ChainflowException):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        if shapes:
            message = "{} (shapes: {})".format(
                message, ", ".join(str(tuple(s)) for s in shapes)
            )
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class NumericInputError(ChainflowException):
    """An input contains NaN or Inf."""


class SequenceTooShortError(ChainflowException):
    """A feature sequence is too short for the encoder's subsampling."""


class VocabularyError(ChainflowException):
    """A symbol or id is not part of the vocabulary."""


class ConfigError(ChainflowException):
    """A key = value file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = "line {}: {}".format(line, message)
        super().__init__(message)
        self.line = line


class CheckpointError(ChainflowException):
    """A checkpoint or feature file is unreadable or incompatible."""


class DivergenceError(ChainflowException):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
