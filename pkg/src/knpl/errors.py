"""Exception hierarchy shared across the package."""


class KnplError(Exception):
    """Base class for every error raised by knpl."""


class NumericError(KnplError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class GraphError(KnplError):
    """Gradient requested for a node that is not on the tape."""


class ShapeError(KnplError, ValueError):
    pass


class ConfigError(KnplError, ValueError):
    pass


class LengthError(KnplError, ValueError):
    pass


class CapacityError(KnplError):
    """The requested number of items exceeds what the world can supply."""


class TemplateError(KnplError):
    pass


class CandidateExhaustionError(KnplError):
    pass


class TrainingError(KnplError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class FilteredInputError(KnplError):
    """An instance that fails the single-hop knowledge filter reached a stage that needs it."""


class SequenceLengthError(KnplError):
    pass


class IdentificationError(KnplError):
    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics if diagnostics is not None else []


class EmptySetError(KnplError, ValueError):
    pass


class InterventionConflictError(KnplError):
    pass


class UndefinedMetricError(KnplError, ZeroDivisionError):
    pass


class BaselineError(KnplError, ValueError):
    pass


class SamplingError(KnplError, ValueError):
    pass


class DegenerateSampleError(KnplError, ValueError):
    pass


class StaleCacheError(KnplError):
    pass


class StageError(KnplError):
    def __init__(self, stage: str, message: str, instance_id: str | None = None):
        where = f"stage {stage!r}" + (f", instance {instance_id}" if instance_id else "")
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.instance_id = instance_id


class NetworkError(KnplError):
    pass


class ParseError(KnplError):
    def __init__(self, message: str, excerpt: str = ""):
        super().__init__(f"{message}: {excerpt[:200]!r}" if excerpt else message)
        self.excerpt = excerpt
