"""Exception hierarchy shared by all modules.

The CLI maps these onto stable exit codes (see cli.py): input/path
problems exit with 2, shape/format problems with 3, anything else with 1.
"""


class AttnregError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(AttnregError):
    """Array dimensions or channel counts do not conform."""


class ParamError(AttnregError):
    """An operation parameter is outside its valid range."""


class InputError(AttnregError):
    """Input data is invalid (NaNs, out-of-domain points, bad paths)."""


class UsageError(AttnregError):
    """An API or CLI contract was violated by the caller."""


class FileFormatError(AttnregError):
    """A file could not be parsed; message carries positional diagnostics."""
