"""Exception taxonomy shared across the package."""


class ClickSegError(Exception):
    """Base class for all package errors."""


class InputError(ClickSegError):
    """Invalid caller-supplied data (bad shapes, non-finite values, k > N)."""


class ConfigError(ClickSegError):
    """Inconsistent configuration or parameter shapes."""


class FormatError(ClickSegError):
    """Malformed file content (bad magic, truncation, schema violations)."""


class ProtocolError(ClickSegError):
    """Interaction contract violation (no clicks, first click negative)."""


class NumericError(ClickSegError):
    """Non-finite activations or divergence during computation."""
