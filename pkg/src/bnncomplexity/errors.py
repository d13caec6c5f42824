"""Exception hierarchy shared across the package.

Two families: input/configuration problems (bad files, bad config, bad
data on disk) and computation problems raised by the numeric layers.
The CLI maps the former to exit code 2 and run-level failures to 1.
"""


class BnncError(Exception):
    """Base class for all package-specific errors."""


# --- input / configuration -------------------------------------------------

class ConfigError(BnncError):
    """Malformed or inconsistent experiment configuration."""


class ParseError(BnncError):
    """Malformed complexity-table file (bad line, duplicate code, ...)."""


class IncompleteTable(BnncError):
    """Table file misses codes and declares no fallback value."""


class InvalidComplexity(BnncError):
    """Complexity value that is negative or not finite."""


class FormatError(BnncError):
    """IDX container with a wrong magic number or header."""


class TruncatedError(BnncError):
    """IDX container shorter than its header declares."""


class DegenerateData(BnncError):
    """Data pool with zero pixel variance; cannot be normalized."""


class StratificationError(BnncError):
    """A class has too few examples for the requested stratified sample."""


# --- computation -------------------------------------------------------------

class InvalidBlockShape(BnncError):
    """Block that is not a 4x4 array of {0,1} values."""


class NonFiniteWeight(BnncError):
    """Weight matrix containing NaN or infinite entries."""


class DimensionError(BnncError):
    """Shape mismatch between a batch and the model it is fed to."""


class EmptyDataset(BnncError):
    """Training requested on a dataset with zero examples."""


class NegativeMetric(BnncError):
    """Series handed to the normalization pipeline with negative values."""


class UndefinedCorrelation(BnncError):
    """Correlation of a zero-variance (or all-tied) input."""


class InsufficientData(BnncError):
    """Fewer qualifying epochs or runs than the statistic needs."""


class BootstrapFailure(BnncError):
    """Bootstrap could not draw enough valid resamples within its cap."""
