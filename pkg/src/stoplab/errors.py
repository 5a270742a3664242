"""Exception hierarchy shared by every stoplab module."""


class StoplabError(Exception):
    """Base class for all stoplab errors."""

    #: machine-readable error kind, also used by the CLI error record
    kind = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def record(self):
        rec = {"error": self.kind, "message": str(self)}
        rec.update({k: _jsonable(v) for k, v in self.details.items()})
        return rec


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


class OutOfRange(StoplabError, ValueError):
    kind = "out_of_range"


class InvalidStopOrder(StoplabError, ValueError):
    kind = "invalid_stop_order"


class InvalidParameter(StoplabError, ValueError):
    kind = "invalid_parameter"


class InvalidRule(StoplabError, ValueError):
    kind = "invalid_rule"


class PartitionViolation(StoplabError, ValueError):
    kind = "partition_violation"


class ScenarioInvalid(StoplabError, ValueError):
    kind = "scenario_invalid"


class ConfigError(StoplabError, ValueError):
    kind = "config_error"


class InsufficientSamples(StoplabError, ValueError):
    kind = "insufficient_samples"


class InsufficientBundle(InsufficientSamples):
    kind = "insufficient_bundle"


class NumericalError(StoplabError, ArithmeticError):
    """Failures of the numerics rather than of the inputs (CLI exit code 3)."""

    kind = "numerical_error"


class NumericalBlowup(NumericalError):
    kind = "numerical_blowup"


class NonPositiveRate(NumericalError):
    kind = "non_positive_rate"


class DegenerateStoppingFamily(NumericalError):
    kind = "degenerate_stopping_family"


class InsufficientIntrinsicTime(NumericalError):
    kind = "insufficient_intrinsic_time"
