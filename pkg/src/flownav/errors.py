"""Exception hierarchy. Every error carries a stable ``code`` string."""


class FlownavError(Exception):
    code = "ERROR"
    exit_code = 1

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class InputError(FlownavError):
    """Invalid user input or data; maps to CLI exit code 2."""

    code = "INPUT"
    exit_code = 2


class BadFormat(InputError):
    code = "BAD_FORMAT"


class BadAnnotation(InputError):
    code = "BAD_ANNOTATION"


class NotConnected(InputError):
    code = "NOT_CONNECTED"


class DimensionMismatch(InputError):
    code = "DIMENSION_MISMATCH"


class OutOfBounds(InputError):
    code = "OUT_OF_BOUNDS"


class TooFewSamples(InputError):
    code = "TOO_FEW_SAMPLES"


class ObsOutsideFluid(InputError):
    code = "OBS_OUTSIDE_FLUID"


class ZeroLengthEdge(InputError):
    code = "ZERO_LENGTH_EDGE"


class EmptyGraph(InputError):
    code = "EMPTY_GRAPH"


class StartGoalUnmapped(InputError):
    code = "START_GOAL_UNMAPPED"


class NoPath(FlownavError):
    code = "NO_PATH"
    exit_code = 4


class Unreachable(FlownavError):
    code = "UNREACHABLE"
    exit_code = 4


class NotArrived(FlownavError):
    code = "NOT_ARRIVED"
    exit_code = 4


class NumericError(FlownavError):
    """Numerical breakdown; maps to CLI exit code 5."""

    code = "NUMERIC"
    exit_code = 5


class Diverged(NumericError):
    code = "DIVERGED"


class NonFinite(NumericError):
    code = "NON_FINITE"
