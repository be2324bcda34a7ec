"""Exception hierarchy. ``exit_code`` maps onto the CLI exit status."""


class BanError(Exception):
    exit_code = 1


class InputError(BanError, ValueError):
    """Malformed input: bad shapes, labels out of range, missing files."""

    exit_code = 2


class ConfigurationError(BanError, ValueError):
    """Mismatched noise/mask/model or invalid trigger settings."""

    exit_code = 2


class IngestionError(InputError):
    def __init__(self, message: str, path=None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class EvaluationError(BanError):
    exit_code = 2


class PlottingError(BanError):
    exit_code = 2


class OptimizationError(BanError, RuntimeError):
    """Non-finite loss or gradient during an inner optimization."""

    exit_code = 3

    def __init__(self, message: str, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class TrainingError(BanError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class DefenseError(TrainingError):
    pass
