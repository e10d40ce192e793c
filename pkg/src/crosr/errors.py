"""Exception hierarchy.

Every error carries a short machine-readable ``category`` so the command line
can report failures uniformly and map them to exit codes.
"""


class CrosrError(Exception):
    category = "error"
    exit_code = 1


class ConfigurationError(CrosrError):
    category = "config"
    exit_code = 2


class InputError(CrosrError):
    category = "input"
    exit_code = 3


class FormatError(InputError):
    category = "format"


class FittingError(CrosrError):
    category = "fitting"
    exit_code = 4


class DegenerateFitError(FittingError):
    category = "degenerate-fit"


class NumericalError(CrosrError):
    category = "numerical"
    exit_code = 5
