class AttentionBenchError(Exception):
    """Base class for every error raised by attention_bench."""


class DimensionError(AttentionBenchError, ValueError):
    """A tensor shape does not fit the operation it was passed to."""


class NumericalError(AttentionBenchError, ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(AttentionBenchError, RuntimeError):
    """The autograd graph was used out of order (non-scalar loss, double backward)."""


class ConfigError(AttentionBenchError, ValueError):
    """An AttentionSpec, ModelConfig or RunSpec field is invalid."""


class DataError(AttentionBenchError, ValueError):
    """The corpus or a batch cannot be used (unreadable, exhausted, all padding)."""


class PowerTraceError(AttentionBenchError, ValueError):
    """A power trace file could not be parsed."""

    def __init__(self, message: str, line_number: int = 0):
        super().__init__(f"line {line_number}: {message}" if line_number else message)
        self.line_number = line_number


class CheckpointError(AttentionBenchError, ValueError):
    """A checkpoint file is malformed or does not match the model."""
