"""Exception taxonomy shared by every subsystem.

The CLI maps these onto stable exit codes, so new failure modes should
subclass one of the four concrete categories rather than raising bare
exceptions.
"""


class CapsError(Exception):
    """Base class for all package-specific failures."""


class ConfigurationError(CapsError):
    """Invalid shapes, options, ratios, or config files."""


class NumericDomainError(CapsError):
    """An operation left its numeric domain (log of non-positive input,
    non-finite activations, non-finite objective)."""


class IngestionError(CapsError):
    """Malformed input data (missing CSV cells, unparseable numbers)."""


class UnsupportedModeError(CapsError):
    """A valid option used with an operation that does not support it."""
