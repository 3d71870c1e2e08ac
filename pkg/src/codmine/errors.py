"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid detector, strategy, schedule or experiment configuration."""


class StructuralError(ValueError):
    """A mask, plan or checkpoint does not fit the model it is applied to."""


class EmptySummaryError(ValueError):
    """A layer summary holds no activations for the requested statistic."""


class DivergenceError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class DataError(ValueError):
    """Empty tasks, bad synthetic specs and similar dataset problems."""


class IngestionError(DataError):
    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = f"{message}: {', '.join(map(str, self.offenders))}"
        super().__init__(message)


class DivisionDomainError(ZeroDivisionError):
    """A ratio metric was asked to divide by a zero upper-bound value."""


class ComparisonError(ValueError):
    """Manifests passed to a report do not describe the same benchmark."""
