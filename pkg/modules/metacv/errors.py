from __future__ import annotations

from typing import Optional

import numpy as np


class MetaCVError(Exception):
    """
    Базовое исключение библиотеки.
    """


class DimensionMismatchError(MetaCVError, ValueError):
    pass


class NonFiniteError(MetaCVError, FloatingPointError):
    """
    NaN/Inf в значении или градиенте. Никогда не пробрасываем такие значения дальше молча.
    """


class UnsupportedModeError(MetaCVError, ValueError):
    pass


class EmptySetError(MetaCVError, ValueError):
    pass


class SingularSystemError(MetaCVError, np.linalg.LinAlgError):
    """
    Линейная система (матрица Грама) вырождена.
    condition — оценка числа обусловленности на момент ошибки.
    """

    def __init__(self, message: str, condition: Optional[float] = None):
        super().__init__(message if condition is None else f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class NumericalAbort(MetaCVError, RuntimeError):
    """
    Обучение остановлено из-за нефинитного лосса/градиента.
    """

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class ConfigError(MetaCVError, ValueError):
    """
    Ошибка конфигурации эксперимента. location — путь до ключа, например "meta.alpha".
    """

    def __init__(self, message: str, location: Optional[str] = None):
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location
