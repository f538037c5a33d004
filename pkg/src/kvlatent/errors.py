"""Shared exception types.

Contract violations (bad shapes, invalid plans, malformed configs) raise
ContractError; numeric faults during training or strict-mode checks raise
NumericError; data generation and ingestion problems get their own types so
the CLI can map them onto exit codes.
"""

from __future__ import annotations


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class ShapeError(ContractError):
    """Operand shapes are incompatible with the requested operation."""

    def __init__(self, op: str, expected: str, actual: str):
        super().__init__(f"{op}: expected {expected}, got {actual}")
        self.op = op
        self.expected = expected
        self.actual = actual


class NumericError(RuntimeError):
    """Non-finite values or numerically invalid state was detected."""


class GenerationError(RuntimeError):
    """A data generator exhausted its sampling budget."""


class DataFormatError(ContractError):
    """A data file failed structural validation."""
