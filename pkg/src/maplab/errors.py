"""Exception types raised across maplab."""


class MaplabError(Exception):
    """Base class for all maplab errors."""


class ConfigError(MaplabError):
    pass


class DatasetLoadError(MaplabError):
    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)


class IntegrityError(MaplabError):
    pass


class InsufficientSamplesError(MaplabError):
    def __init__(self, klass, available, requested):
        self.klass = klass
        self.available = available
        self.requested = requested
        super().__init__(
            f"class {klass} has {available} samples, {requested} requested"
        )


class StrategyConfigError(ConfigError):
    pass


class CacheIntegrityError(MaplabError):
    pass


class UnreachableTargetError(MaplabError):
    """Teacher training ran out of steps before hitting the accuracy band.

    ``best`` holds the checkpoint with the highest validation accuracy seen,
    if one was recorded.
    """

    def __init__(self, target, best_acc, steps, best=None):
        self.target = target
        self.best_acc = best_acc
        self.steps = steps
        self.best = best
        super().__init__(
            f"target accuracy {target:.4f} not reached in {steps} steps "
            f"(best seen {best_acc:.4f})"
        )


class FitError(MaplabError):
    def __init__(self, message, residual=float("nan")):
        self.residual = residual
        super().__init__(f"{message} (best residual {residual:.3g})")
