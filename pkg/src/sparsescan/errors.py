"""Exception taxonomy shared by all sparsescan modules.

The CLI maps any :class:`SparseScanError` to exit code 1; usage errors
(unknown flags, missing arguments) exit with code 2 via argparse.
"""


class SparseScanError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SparseScanError):
    """A file could not be parsed (bad magic, malformed record, truncation)."""


class ValidationError(SparseScanError):
    """Data violates a structural invariant (bounds, polarity, containment)."""


class OrderingError(ValidationError):
    """Event timestamps are not non-decreasing."""


class ConfigError(SparseScanError):
    """A configuration value is out of its legal range."""


class ShapeError(SparseScanError):
    """Array arguments have inconsistent shapes."""
