"""Exception types raised across the pipeline."""


class MpgcnError(Exception):
    """Base class for all library errors."""


class ShapeError(MpgcnError, ValueError):
    """Array extents do not agree with an operation's contract."""


class ContractError(MpgcnError, ValueError):
    """A precondition of a call was violated."""


class ConfigError(MpgcnError, ValueError):
    pass


class IngestError(MpgcnError):
    pass


class GraphError(MpgcnError):
    pass


class TrainingError(MpgcnError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class UndefinedMetricError(MpgcnError, ValueError):
    pass


class FitError(MpgcnError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class OptimizationError(MpgcnError):
    pass


class GeneratorError(MpgcnError):
    pass
