"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI to build its
``error:<category>:`` prefix.
"""


class MotorMonError(Exception):
    category = "runtime"


class ConfigError(MotorMonError):
    """Invalid configuration. ``field`` names the offending setting when known."""

    category = "config"

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class FormatError(MotorMonError):
    """Malformed recording file."""

    category = "format"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class PartialReadError(FormatError):
    category = "partial-read"


class DataQualityError(MotorMonError):
    category = "data-quality"


class RoutingError(MotorMonError):
    category = "routing"


class OrderAnalysisError(MotorMonError):
    category = "order-analysis"


class SingularWindowError(OrderAnalysisError):
    pass


class InvalidWindowError(OrderAnalysisError):
    pass


class OutOfRangeAngleError(OrderAnalysisError):
    pass


class StalledShaftError(OrderAnalysisError):
    pass


class InsufficientPulsesError(OrderAnalysisError):
    pass


class CoverageError(OrderAnalysisError):
    def __init__(self, message, index):
        self.index = index
        super().__init__(message)


class InsufficientDataError(OrderAnalysisError):
    pass


class ComparabilityError(OrderAnalysisError):
    pass


class ValidationError(MotorMonError):
    category = "validation"


class StoreError(MotorMonError):
    category = "store"


class SchemaMismatchError(StoreError):
    category = "config"


class ProtocolError(MotorMonError):
    category = "protocol"


class PipelineError(MotorMonError):
    """Raised when a pipeline activity fails; ``stats`` holds counts so far."""

    def __init__(self, message, stats=None):
        self.stats = stats
        super().__init__(message)
