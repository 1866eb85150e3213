"""Exception hierarchy shared by all marrowcast modules.

Every error carries an ``exit_code`` so the CLI can map it to a process
status without a lookup table: 1 usage, 2 data, 3 numerical.
"""


class MarrowcastError(Exception):
    exit_code = 2


class ConfigError(MarrowcastError, ValueError):
    exit_code = 1


class DataError(MarrowcastError):
    exit_code = 2


class NiftiFormatError(DataError):
    """Bad magic or malformed header."""


class UnsupportedDataError(DataError):
    """Valid NIfTI-1, but a datatype or layout this reader does not handle."""


class NiftiIOError(DataError, OSError):
    pass


class GeometryError(DataError, ValueError):
    """Mismatched dims/spacing between volumes that must share a grid."""


class ShapeError(DataError, ValueError):
    pass


class CorruptionError(DataError):
    """Checkpoint manifest disagrees with its binary blob."""


class GenerationError(DataError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass


class UndefinedMetricError(DataError, ValueError):
    """Metric is undefined for the given labels (e.g. AUC with a single class)."""


class NumericalError(MarrowcastError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericalError):
    def __init__(self, message, last_stable=None):
        super().__init__(message)
        self.last_stable = last_stable


class OptimizerError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    def __init__(self, message, batch_index=None, loss=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.loss = loss
