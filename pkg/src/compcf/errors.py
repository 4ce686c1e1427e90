"""Exception classes shared across the package.

The CLI maps these onto distinct process exit codes, so new exceptions
should subclass one of the four failure families below.
"""


class CompcfError(Exception):
    """Base class for all package errors."""


class ConfigError(CompcfError):
    """Invalid configuration value or malformed config file."""


class DataError(CompcfError):
    """Bad input data: missing files, shape mismatches, violated preconditions."""


class ShapeMismatchError(DataError):
    """Input array shape does not match the model's expected input shape."""


class DisjointnessError(DataError):
    """Two corpora that must not share images do share images."""


class NumericalError(CompcfError):
    """Numerical failure: non-finite values, failed fits, failed optimizations."""


class TrainingError(NumericalError):
    """Model training did not reach its required quality floor."""


class CalibrationError(NumericalError):
    """Competency calibration failed; carries per-bin diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OptimizationError(NumericalError):
    """Counterfactual optimization produced a non-finite loss or gradient."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace) if loss_trace is not None else []


class CorpusSynthesisError(DataError):
    """Corpus synthesis could not fill the requested per-cause quota."""


class EndpointError(CompcfError):
    """Language-model endpoint unreachable or persistently failing."""
