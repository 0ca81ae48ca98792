"""Exception hierarchy.

Each class carries the CLI exit code it maps to, so the command-line layer
can translate failures without a lookup table.
"""


class AlphaError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(AlphaError, ValueError):
    """Inputs violate a documented precondition (shapes, ranges, config)."""

    exit_code = 2


class NumericalError(AlphaError, ArithmeticError):
    """A numerical routine failed (singular system, solver non-convergence)."""

    exit_code = 3


class MatrixFileError(AlphaError, OSError):
    """A matrix or manifest file could not be read or parsed."""

    exit_code = 4


class RaggedRowError(MatrixFileError):
    def __init__(self, row, expected, got, path=None):
        self.row, self.expected, self.got, self.path = row, expected, got, path
        super().__init__(
            f"RaggedRow(row={row}): expected {expected} columns, got {got}"
            + (f" in {path}" if path else "")
        )


class NonNumericCellError(MatrixFileError):
    def __init__(self, row, col, text, path=None):
        self.row, self.col, self.text, self.path = row, col, text, path
        super().__init__(
            f"NonNumericCell(row={row}, col={col}): {text!r}"
            + (f" in {path}" if path else "")
        )


class NonFiniteEntryError(MatrixFileError):
    def __init__(self, row, col, path=None):
        self.row, self.col, self.path = row, col, path
        super().__init__(
            f"NonFiniteEntry(row={row}, col={col})" + (f" in {path}" if path else "")
        )


class RankDeficientBasisError(NumericalError):
    """Sieve basis has no usable columns after rank filtering."""

    def __init__(self, dropped):
        self.dropped = list(dropped)
        super().__init__(f"sieve basis is rank deficient; dropped columns {self.dropped}")


class ClimeColumnError(NumericalError):
    def __init__(self, column, reason):
        self.column, self.reason = column, reason
        super().__init__(f"CLIME column {column}: {reason}")


class StageError(AlphaError):
    """Wraps a failure inside the pipeline with the stage and batch that raised it."""

    def __init__(self, stage, batch_id, cause):
        self.stage, self.batch_id, self.cause = stage, batch_id, cause
        self.exit_code = getattr(cause, "exit_code", 3)
        where = f"stage={stage}" + (f", batch={batch_id}" if batch_id is not None else "")
        super().__init__(f"[{where}] {cause}")
