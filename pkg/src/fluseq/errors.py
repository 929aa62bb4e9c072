"""Exception taxonomy shared across the package.

Every error raised by fluseq derives from FluseqError so callers (the CLI in
particular) can map failure families to exit codes without string matching.
"""


class FluseqError(Exception):
    """Base class for all fluseq errors."""


class DimensionError(FluseqError):
    """Operand shapes are incompatible; message names both shapes."""


class DomainError(FluseqError):
    """A value is outside the domain an operation accepts."""


class ContractError(FluseqError):
    """An API precondition was violated (e.g. non-scalar loss for backward)."""


class ConfigError(FluseqError):
    """Invalid run configuration: bad key, bad type, or inconsistent dims."""


class DataError(FluseqError):
    """Base class for data ingestion and preparation failures."""


class ParseError(DataError):
    """A CSV file violates its documented schema.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingColumnError(ParseError):
    pass


class DuplicateWeekError(ParseError):
    pass


class WeekGapError(ParseError):
    pass


class BadValueError(ParseError):
    pass


class RangeError(ParseError):
    pass


class EmptySeriesError(ParseError):
    pass


class JoinError(DataError):
    """Channel alignment failed: empty or gapped week intersection."""


class DegenerateScaleError(DataError):
    """A channel is constant over the scaler fit region."""


class UndefinedCorrelationError(FluseqError):
    """Pearson correlation requested for a zero-variance argument."""


class CheckpointError(FluseqError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """The file's format version tag is not one this build can read."""


class CheckpointDimError(CheckpointError):
    """Declared architecture does not match the requested one."""


class CheckpointCorruptError(CheckpointError):
    """The file is structurally damaged (bad header or truncated payload)."""


class TrainingDivergedError(FluseqError):
    """Training aborted on a non-finite loss; carries epoch/batch diagnostics."""

    def __init__(self, epoch, batch, loss):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}"
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
