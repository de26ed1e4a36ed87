from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .autodiff import ScalarProgram, TensorLike, as_tensor, ensure_finite
from .errors import DimensionMismatchError, EmptySetError
from .network import CVParameters
from .stein import SteinCV, stein_values

# Множитель для 95% доверительного интервала (нормальный квантиль, не Стьюдент)
CI95_MULTIPLIER = 1.96


# ============================
# Данные задачи
# ============================

class Subset(NamedTuple):
    """
    Тройки {x, ∇log π(x), f(x)}: points (n, d), scores (n, d), values (n,).
    """
    points: torch.Tensor
    scores: torch.Tensor
    values: torch.Tensor

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class TaskDataset:
    """
    D_t = {xᵢ, ∇log π(xᵢ), f(xᵢ)}, i = 1..N. Support S — первые m записей, query Q — остальные N − m.
    """
    points: torch.Tensor
    scores: torch.Tensor
    values: torch.Tensor
    support_size: int

    def __post_init__(self):
        points = as_tensor(self.points)
        if points.dim() == 1:
            points = points.reshape(-1, 1)
        scores = as_tensor(self.scores).reshape(points.shape)
        values = as_tensor(self.values).reshape(-1)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "values", values)
        if values.shape[0] != points.shape[0]:
            raise DimensionMismatchError(f"{points.shape[0]} points but {values.shape[0]} values")
        if not 0 <= self.support_size <= values.shape[0]:
            raise ValueError(f"support size {self.support_size} outside [0, {values.shape[0]}]")
        for name, tensor in (("points", points), ("scores", scores), ("values", values)):
            ensure_finite(tensor, f"task dataset {name}")

    @classmethod
    def from_arrays(
            cls,
            points: TensorLike,
            scores: TensorLike,
            values: TensorLike,
            support_size: Optional[int] = None,
            rng: Optional[np.random.Generator] = None,
    ) -> "TaskDataset":
        """
        Если передан rng — один раз перемешиваем записи перед разбиением. По умолчанию m = ⌊N/2⌋.
        """
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        scores = np.asarray(scores, dtype=np.float64).reshape(points.shape)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if rng is not None:
            order = rng.permutation(values.shape[0])
            points, scores, values = points[order], scores[order], values[order]
        m = values.shape[0] // 2 if support_size is None else support_size
        return cls(torch.from_numpy(points), torch.from_numpy(scores), torch.from_numpy(values), m)

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def support(self) -> Subset:
        m = self.support_size
        return Subset(self.points[:m], self.scores[:m], self.values[:m])

    @property
    def query(self) -> Subset:
        m = self.support_size
        return Subset(self.points[m:], self.scores[m:], self.values[m:])


# ============================
# Оценки
# ============================

@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    n: int
    ci95_halfwidth: float

    @classmethod
    def from_samples(cls, samples: TensorLike, offset: float = 0.0) -> "Estimate":
        """
        value = offset + среднее; std_error = выборочное std (ddof=1) / √n, 0 при n ≤ 1.
        """
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        n = samples.shape[0]
        if n == 0:
            raise EmptySetError("cannot build an estimate from an empty sample")
        if not np.all(np.isfinite(samples)):
            raise FloatingPointError("non-finite sample in estimate")
        std_error = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(
            value=float(offset + np.mean(samples)),
            std_error=std_error,
            n=n,
            ci95_halfwidth=CI95_MULTIPLIER * std_error,
        )


def mc_estimate(values: TensorLike) -> Estimate:
    """
    Обычное Монте-Карло: (1/N) Σ f(xᵢ).
    """
    return Estimate.from_samples(values)


def cv_estimate(cv: SteinCV, params: CVParameters, data: TaskDataset) -> Estimate:
    """
    Оценка с контрольной переменной по query-множеству:
    (1/(N−m)) Σ_{i>m} (f(xᵢ) − g(xᵢ; γ)) + γ₀ = среднее по Q от (f − g_{γ1:p}).
    γ₀ сокращается, поэтому результат от него не зависит.
    """
    query = data.query
    if len(query) == 0:
        raise EmptySetError("query set is empty")
    with torch.no_grad():
        zero_mean_part = stein_values(cv, params.weights, query.points, query.scores)
    ensure_finite(zero_mean_part, "control variate on query set")
    residuals = query.values - zero_mean_part
    return Estimate.from_samples(residuals.numpy())


# ============================
# Эмпирический лосс J_S(γ)
# ============================

def loss_fn(cv: SteinCV, subset: Subset, lam: float = 0.0) -> ScalarProgram:
    """
    γ (плоский вектор длины p+1) -> (1/m) Σ (f(xᵢ) − g(xᵢ; γ))² + λ‖γ1:p‖². γ₀ не штрафуется.
    """
    if len(subset) == 0:
        raise EmptySetError("cannot build a loss on an empty subset")
    if lam < 0:
        raise ValueError(f"penalty must be non-negative, got {lam}")
    points, scores, values = subset

    def loss(gamma: torch.Tensor) -> torch.Tensor:
        weights = gamma[1:]
        fitted = gamma[0] + stein_values(cv, weights, points, scores)
        return torch.mean((values - fitted) ** 2) + lam * torch.sum(weights ** 2)

    return loss


def empirical_loss(cv: SteinCV, params: CVParameters, subset: Subset, lam: float = 0.0) -> float:
    with torch.no_grad():
        value = loss_fn(cv, subset, lam)(params.flat())
    return float(ensure_finite(value, "empirical loss"))


# ============================
# Агрегация по задачам
# ============================

@dataclass(frozen=True)
class TaskErrors:
    mae: float
    mae_ci95: float
    per_task: List[float]


def task_errors(estimates: Sequence[Estimate], truths: Sequence[float]) -> TaskErrors:
    """
    MAE по задачам и полуширина 95% ЦПТ-интервала.
    """
    if len(estimates) != len(truths):
        raise DimensionMismatchError(f"{len(estimates)} estimates but {len(truths)} truths")
    if not estimates:
        raise EmptySetError("no estimates to aggregate")
    errors = np.abs(np.array([e.value for e in estimates]) - np.asarray(truths, dtype=np.float64))
    summary = Estimate.from_samples(errors)
    return TaskErrors(mae=summary.value, mae_ci95=summary.ci95_halfwidth, per_task=errors.tolist())
