from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from modules.metacv.estimators import TaskDataset

# Пространства имён сидов: обучающие и тестовые задачи никогда не делят поток случайных чисел
SEED_NAMESPACES = {
    "train": 0,
    "test": 1,
}


def task_rng(seed: int, namespace: str, index: int) -> np.random.Generator:
    if namespace not in SEED_NAMESPACES:
        raise ValueError(f"unknown seed namespace '{namespace}', expected one of {sorted(SEED_NAMESPACES)}")
    return np.random.default_rng([int(seed), SEED_NAMESPACES[namespace], int(index)])


def task_seed(seed: int, namespace: str, index: int) -> int:
    """
    Сид для обучения на задаче (Neural-CV). Отдельная ветка SeedSequence, не пересекается с потоком данных.
    """
    if namespace not in SEED_NAMESPACES:
        raise ValueError(f"unknown seed namespace '{namespace}', expected one of {sorted(SEED_NAMESPACES)}")
    sequence = np.random.SeedSequence([int(seed), SEED_NAMESPACES[namespace], int(index), 1])
    return int(sequence.generate_state(1)[0] & 0x7FFFFFFF)


@dataclass(frozen=True)
class GroundTruth:
    """
    method: analytic | quadrature_oracle. Для оракулов храним разрешение и оценку ошибки.
    """
    value: float
    method: str
    resolution: Optional[int] = None
    error_estimate: Optional[float] = None


@dataclass(frozen=True)
class TaskRecord:
    """
    Задача вместе с данными и истинным значением интеграла (считается один раз при генерации).
    """
    kind: str
    index: int
    seed: int
    namespace: str
    params: Tuple[float, ...]
    dataset: TaskDataset
    truth: GroundTruth
