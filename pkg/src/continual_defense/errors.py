"""Exception and warning types shared across the library."""


class ContinualDefenseError(Exception):
    """Base class for all library errors."""


class DatasetError(ContinualDefenseError):
    """Dataset source missing, malformed, or violating its invariants."""


class BudgetError(ContinualDefenseError):
    """Defense-budget sampling failed (e.g. a class has fewer than K samples)."""


class AttackError(ContinualDefenseError):
    """Adversarial example generation failed (e.g. non-finite gradients)."""


class ModelError(ContinualDefenseError):
    """Model construction or shape mismatch error."""


class CapacityError(ModelError):
    """Classifier expansion requested but the virtual columns are exhausted."""


class DegenerateBatchError(ContinualDefenseError):
    """A batch cannot support the requested operation (e.g. single-class mixup)."""


class CacheError(ContinualDefenseError):
    """Prototype cache misuse: empty cache, duplicate class id, or capacity overflow."""


class ConfigError(ContinualDefenseError):
    """Scenario configuration is invalid or contains unknown keys."""


class EvaluationError(ContinualDefenseError):
    """Evaluation requested on an empty or inconsistent dataset."""


class NumericalWarning(UserWarning):
    """Non-fatal numerical edge case (zero-norm embedding, zero gradient, ...)."""
