"""Exception types shared across the package."""


class JadeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(JadeError):
    """Tensor or array dimensions do not match the expected shape."""


class StructureError(JadeError):
    """Invalid skeleton structure (cycles, bad parent indices)."""


class ConfigError(JadeError):
    """Invalid or inconsistent configuration values."""


class FormatError(JadeError):
    """A serialized file violates its format (magic, truncation, offsets)."""


class ParseError(FormatError):
    """A text file failed to parse; message carries the line number."""


class ContractError(JadeError):
    """A cross-module contract was violated (wrong pairing, missing stage)."""


class EvaluationError(JadeError):
    """A numeric evaluation produced non-finite values."""


class TrainingDiverged(JadeError):
    """Training loss became non-finite; a diagnostic snapshot was saved."""
