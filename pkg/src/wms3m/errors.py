"""Exception types. The CLI maps these onto exit codes."""


class WorldModelError(Exception):
    exit_code = 1


class ConfigError(WorldModelError, ValueError):
    exit_code = 2


class SchemaError(ConfigError):
    """A required CSV column is missing or the schema is inconsistent."""


class EmptyTraceError(ConfigError):
    pass


class SizingError(ConfigError):
    """A split or window length cannot hold the requested windows."""


class BoundsError(WorldModelError, ValueError):
    """Degenerate PRB action bounds."""


class ModeError(WorldModelError, RuntimeError):
    """A training-only path was reached from inference code."""


class MissingArtifactError(WorldModelError, FileNotFoundError):
    exit_code = 3


class VersionMismatchError(WorldModelError):
    exit_code = 4


class TrainingDivergence(WorldModelError, FloatingPointError):
    def __init__(self, message, *, epoch=None, batch=None, term=None, best_state=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.term = term
        self.best_state = best_state
