"""Exception hierarchy shared by all modules."""


class EscmError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(EscmError, ValueError):
    """Invalid configuration, or a variant/field mismatch."""


class IndexedFeatureError(EscmError, IndexError):
    """A categorical feature index falls outside its field cardinality."""


class DomainError(EscmError, ValueError):
    """A numeric argument is outside the domain of the function."""


class LengthMismatchError(EscmError, ValueError):
    pass


class UndefinedRiskError(EscmError, ValueError):
    """A risk whose normaliser is zero (e.g. naive risk with no clicks)."""


class UndefinedMetricError(EscmError, ValueError):
    pass


class TrainingDiverged(EscmError, FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class AssumptionViolated(EscmError):
    """Generated data does not satisfy E_O[r] > E_D[r]."""


class RatioInfeasible(EscmError, ValueError):
    pass


class ParseError(EscmError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class IntegrityError(EscmError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class NoOverlapError(EscmError, ValueError):
    pass


class DegenerateOutcomeError(EscmError, ValueError):
    pass
