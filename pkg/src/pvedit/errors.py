"""Exception hierarchy shared by every pvedit module.

Everything raised on purpose derives from :class:`PveError` so the CLI can map
failures onto exit codes without string matching.
"""


class PveError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(PveError, ValueError):
    """A run configuration failed validation."""


class InvalidShapeError(PveError, ValueError):
    pass


class ShapeMismatchError(PveError, ValueError):
    pass


class FormatError(PveError):
    """A binary file does not follow its declared layout."""


class TruncationError(FormatError):
    pass


class UnsupportedChannelsError(PveError, ValueError):
    pass


class InvalidScheduleError(PveError, ValueError):
    pass


class StepIndexError(PveError, IndexError):
    pass


class DivisionGuardError(PveError, ZeroDivisionError):
    pass


class DenoiserError(PveError):
    """The noise predictor produced non-finite output."""


class ContractError(PveError):
    """Two objects that must agree (track vs sampler, branch shapes) do not."""


class IndexRangeError(PveError, IndexError):
    pass


class EmptyRowError(PveError, ValueError):
    pass


class CapacityError(PveError):
    pass


class DivergenceError(PveError, FloatingPointError):
    pass


class SpecError(PveError, ValueError):
    pass


class EmptyMaskError(PveError, ValueError):
    pass


class UndefinedMetricError(PveError, ValueError):
    pass


class PipelineError(PveError):
    pass
