"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies rather than bare ValueError.
"""


class InvalidArgumentError(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigError(ValueError):
    """A configuration object failed validation."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or inconsistent with the model."""


class GenerationError(RuntimeError):
    """Scene synthesis could not satisfy its placement constraints."""


class NanAbortError(RuntimeError):
    """Training produced a non-finite value; message names the source layer."""
