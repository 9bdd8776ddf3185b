"""Exception hierarchy shared across the package.

The CLI maps each family onto a process exit code, so new errors should
subclass one of the three bases below.
"""


class DcrobustError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 4


class ConfigurationError(DcrobustError, ValueError):
    """Invalid parameters, configuration files or model combinations."""

    exit_code = 2


class DataFormatError(DcrobustError, ValueError):
    """Malformed dataset bytes, manifests or checkpoints."""

    exit_code = 3


class ShapeError(DataFormatError):
    """Array shapes that do not match what a model or operation expects."""


class ModelError(DcrobustError, RuntimeError):
    """Failures while running a model, an attack or training."""

    exit_code = 4


class UnsupportedOperationError(ModelError, NotImplementedError):
    """The classifier cannot provide the requested operation (e.g. gradients)."""


class TrainingError(ModelError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(f"{message} (epoch={epoch}, step={step})")
        self.epoch = epoch
        self.step = step


class PipelineError(ModelError):
    def __init__(self, message, source_index=None):
        super().__init__(f"{message} (source_index={source_index})")
        self.source_index = source_index


class ReportValidationError(ConfigurationError):
    """A report row whose R does not agree with its three accuracies."""
