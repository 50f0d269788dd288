"""Exception hierarchy shared by all windcast modules.

The CLI maps :class:`NumericError` to exit code 2 and every other
:class:`WindcastError` to exit code 1.
"""


class WindcastError(Exception):
    """Base class for all package errors."""


class ConfigError(WindcastError, ValueError):
    """Invalid configuration (grid extents, model schedule, unknown keys)."""


class InputError(WindcastError, ValueError):
    """Invalid or missing input data."""


class SchemaError(InputError):
    """A CSV file lacks a required column."""


class OutOfDomainError(WindcastError, ValueError):
    """A coordinate or time lies outside the domain an operation covers."""

    def __init__(self, message, coords=None):
        super().__init__(message)
        self.coords = coords


class ShapeError(WindcastError, ValueError):
    """Array shapes do not agree."""


class NumericError(WindcastError, FloatingPointError):
    """A NaN or Inf appeared in a computation."""


class GraphError(WindcastError, RuntimeError):
    """Misuse of the differentiation graph."""


class FormatError(WindcastError, ValueError):
    """A binary cube file is corrupt, truncated or of the wrong version."""


class CheckpointError(WindcastError, ValueError):
    """A model checkpoint does not match the requested configuration."""


class TrainingError(WindcastError, RuntimeError):
    """Training cannot proceed (no usable samples, NaN loss)."""
