from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from config import ODE_GRID, ODE_TRUTH_GRID
from modules.metacv.estimators import TaskDataset
from modules.metacv.stein import gaussian_score

from .records import GroundTruth, TaskRecord, task_rng

"""
Краевая задача d/ds(c(s)·du/ds) = −50x², u(0) = u(1) = 0, c(s) = 1 + a·s.
x — случайный параметр (π = N(0,1)), s — пространственная координата.
f(x; a) = ∫₀¹ u(s, x; a) ds.
"""

FORCING_SCALE = 50.0


@dataclass(frozen=True)
class OdeTask:
    a: float
    n_s: int = ODE_GRID

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.array([ode_solve(self.a, float(x), self.n_s) for x in np.asarray(points).reshape(-1)])


@dataclass(frozen=True)
class OdeEnvironment:
    a_range: Tuple[float, float] = (0.0, 1.0)
    n_s: int = ODE_GRID
    n_s_truth: int = ODE_TRUTH_GRID

    def draw(self, rng: np.random.Generator) -> OdeTask:
        return OdeTask(a=float(rng.uniform(*self.a_range)), n_s=self.n_s)


@lru_cache(maxsize=4096)
def _unit_deflection(a: float, n_s: int) -> float:
    """
    ∫₀¹ u ds при правой части −1 (x² · 50 = 1): консервативная схема с коэффициентами c на полуцелых узлах.
    """
    h = 1.0 / n_s
    faces = 1.0 + a * (np.arange(n_s) + 0.5) * h  # c(s_{k+1/2}), k = 0..n_s−1
    interior = n_s - 1
    diagonal = (faces[:-1] + faces[1:]) / h ** 2
    off_diagonal = -faces[1:-1] / h ** 2
    banded = np.zeros((3, interior))
    banded[0, 1:] = off_diagonal
    banded[1, :] = diagonal
    banded[2, :-1] = off_diagonal
    u = solve_banded((1, 1), banded, np.ones(interior))
    return float(trapezoid(np.concatenate([[0.0], u, [0.0]]), dx=h))


def ode_solve(a: float, x: float, n_s: int = ODE_GRID) -> float:
    """
    f(x; a) на сетке из n_s интервалов. По линейности f(x; a) = 50x²·C_{n_s}(a).
    """
    if n_s < 2:
        raise ValueError(f"grid size must be >= 2, got {n_s}")
    return FORCING_SCALE * x * x * _unit_deflection(float(a), int(n_s))


def ode_truth(a: float, n_s_truth: int = ODE_TRUTH_GRID) -> GroundTruth:
    """
    E_{X~N(0,1)}[f(X; a)] = f(1; a), поскольку E[X²] = 1.
    Оценка ошибки по Ричардсону: |f_n − f_{n/2}| / 3 (второй порядок).
    """
    fine = ode_solve(a, 1.0, n_s_truth)
    coarse = ode_solve(a, 1.0, max(2, n_s_truth // 2))
    return GroundTruth(
        value=fine,
        method="quadrature_oracle",
        resolution=n_s_truth,
        error_estimate=abs(fine - coarse) / 3.0,
    )


def sample_ode_tasks(
        env: OdeEnvironment,
        count: int,
        n_per_task: int,
        seed: int,
        namespace: str = "train",
) -> List[TaskRecord]:
    if count < 1 or n_per_task < 1:
        raise ValueError("count and n_per_task must be >= 1")
    records = []
    for index in range(count):
        rng = task_rng(seed, namespace, index)
        task = env.draw(rng)
        points = rng.standard_normal(size=(n_per_task, 1))
        dataset = TaskDataset.from_arrays(points, gaussian_score(points), task(points), rng=rng)
        records.append(TaskRecord(
            kind="ode",
            index=index,
            seed=seed,
            namespace=namespace,
            params=(task.a,),
            dataset=dataset,
            truth=ode_truth(task.a, env.n_s_truth),
        ))
    return records
