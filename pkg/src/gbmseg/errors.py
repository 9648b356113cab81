"""Exception hierarchy shared by the pipeline modules."""


class GBMError(Exception):
    """Base class for every error raised by gbmseg."""


class ConfigurationError(GBMError):
    """Invalid configuration, layout or call ordering."""


class ValidationError(GBMError, ValueError):
    """Bad input values or shapes."""


class UndefinedMetricError(GBMError, ArithmeticError):
    """A metric whose denominator is zero."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric} is undefined: {reason}")
        self.metric = metric
        self.reason = reason


class TrainingError(GBMError):
    """Training aborted (non-finite loss or gradient)."""


class PreconditionError(GBMError):
    """Operation called on an object in the wrong state."""


class CheckpointError(GBMError):
    """Base for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSpecMismatch(CheckpointError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass
