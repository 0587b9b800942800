"""Exception types raised across the package."""


class AtrousLabError(Exception):
    """Base class for all package errors."""


class ShapeError(AtrousLabError, ValueError):
    pass


class PrecisionError(AtrousLabError, TypeError):
    pass


class ContractError(AtrousLabError, RuntimeError):
    """A caller violated an operation's precondition."""


class TapeStateError(AtrousLabError, RuntimeError):
    pass


class ConfigError(AtrousLabError, ValueError):
    pass


class ValidationError(AtrousLabError, ValueError):
    pass


class DegenerateBatchError(AtrousLabError, ValueError):
    pass


class FormatError(AtrousLabError, ValueError):
    """Malformed TSR1 payload or shard index."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(AtrousLabError, RuntimeError):
    pass


class NaNLossError(AtrousLabError, FloatingPointError):
    def __init__(self, batch_id, epoch, detail=""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_id}{detail}")
        self.batch_id = batch_id
        self.epoch = epoch
