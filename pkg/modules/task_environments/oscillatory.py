from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from modules.metacv.estimators import TaskDataset

from .records import GroundTruth, TaskRecord, task_rng


@dataclass(frozen=True)
class OscillatoryTask:
    """
    f(x; a) = cos(2π a₁ + Σᵢ a_{i+1} xᵢ) на [0,1]^d, π — равномерное.
    """
    a: Tuple[float, ...]

    @property
    def d(self) -> int:
        return len(self.a) - 1

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.d)
        a = np.asarray(self.a)
        return np.cos(2.0 * np.pi * a[0] + points @ a[1:])


@dataclass(frozen=True)
class OscillatoryEnvironment:
    """
    a₁ ~ Unif(0.4, 0.6), частоты a₂..a_{d+1} ~ Unif(4, 6) независимо.
    """
    d: int
    phase_range: Tuple[float, float] = (0.4, 0.6)
    frequency_range: Tuple[float, float] = (4.0, 6.0)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")

    def draw(self, rng: np.random.Generator) -> OscillatoryTask:
        phase = rng.uniform(*self.phase_range)
        frequencies = rng.uniform(*self.frequency_range, size=self.d)
        return OscillatoryTask(a=(float(phase), *(float(b) for b in frequencies)))


def oscillatory_truth(a, d: int) -> GroundTruth:
    """
    Re[ e^{i2πa₁} ∏ⱼ (e^{i bⱼ} − 1)/(i bⱼ) ], bⱼ = a_{j+1}; при bⱼ = 0 множитель равен 1.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (d + 1,):
        raise ValueError(f"expected {d + 1} parameters for d = {d}, got {a.shape}")
    b = a[1:]
    safe = np.where(b == 0.0, 1.0, b)
    factors = np.where(b == 0.0, 1.0 + 0.0j, (np.exp(1j * safe) - 1.0) / (1j * safe))
    value = np.real(np.exp(2j * np.pi * a[0]) * np.prod(factors))
    return GroundTruth(value=float(value), method="analytic")


def sample_oscillatory_tasks(
        env: OscillatoryEnvironment,
        count: int,
        n_per_task: int,
        seed: int,
        namespace: str = "train",
) -> List[TaskRecord]:
    """
    Каждая задача получает свой поток случайных чисел из (seed, namespace, индекс),
    поэтому результат не зависит от порядка генерации.
    """
    if count < 1 or n_per_task < 1:
        raise ValueError("count and n_per_task must be >= 1")
    records = []
    for index in range(count):
        rng = task_rng(seed, namespace, index)
        task = env.draw(rng)
        points = rng.uniform(0.0, 1.0, size=(n_per_task, env.d))
        dataset = TaskDataset.from_arrays(points, np.zeros_like(points), task(points), rng=rng)
        records.append(TaskRecord(
            kind="oscillatory",
            index=index,
            seed=seed,
            namespace=namespace,
            params=task.a,
            dataset=dataset,
            truth=oscillatory_truth(task.a, env.d),
        ))
    return records
