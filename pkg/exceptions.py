# exceptions.py

from typing import Any, Optional


class DimensionError(ValueError):
    """Невідповідність форм тензорів."""


class NumericError(ValueError):
    """NaN або інше нечислове значення там, де воно неприпустиме."""


class ContractError(ValueError):
    """Порушено передумову операції."""


class DomainError(ValueError):
    """Значення поза допустимою областю (наприклад, id концепту >= vocab)."""


class SingularConstraintError(ContractError):
    """‖∇L_pr‖ = 0: обмеження вироджене, λ* не визначене."""


class ConfigValidationError(ValueError):
    """Некоректна конфігурація запуску."""


class MergeError(ValueError):
    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.layer = layer


class CheckpointCorruptionError(ValueError):
    def __init__(self, message: str, field: str):
        super().__init__(f"{message} (поле: {field})")
        self.field = field


class CheckpointCompatibilityError(ValueError):
    """Чекпойнт LoRA не відповідає базовій моделі (різний хеш конфігурації)."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int, last_state: Any = None):
        super().__init__(f"{message} (крок {step})")
        self.step = step
        self.last_state = last_state
