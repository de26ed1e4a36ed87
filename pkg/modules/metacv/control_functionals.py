from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist

from .errors import EmptySetError, SingularSystemError
from .estimators import Estimate, Subset
from .network import BoundaryCorrection
from .stein import stein_gram

logger = logging.getLogger("metacv.cf")

# τ = NUGGET_SCALE · trace(K₀)/m
NUGGET_SCALE = 1e-8
DEFAULT_GRID_SIZE = 20
DEFAULT_GRID_SPAN = (1e-2, 1e2)


@dataclass(frozen=True)
class CFModel:
    """
    Интерполянт ĝ(x) = β₀ + Σ cᵢ k₀(x, xᵢ), где (K₀ + τI)c = y − β₀1.
    β₀ — оценка E_π[f] самой модели.
    """
    points: np.ndarray
    scores: np.ndarray
    values: np.ndarray
    lengthscale: float
    nugget: float
    coefficients: np.ndarray
    beta0: float
    bc: BoundaryCorrection = BoundaryCorrection()

    def zero_mean_part(self, points: np.ndarray, scores: np.ndarray) -> np.ndarray:
        gram = stein_gram(self.lengthscale, points, scores, self.points, self.scores, bc=self.bc)
        return gram @ self.coefficients

    def predict(self, points: np.ndarray, scores: np.ndarray) -> np.ndarray:
        return self.beta0 + self.zero_mean_part(points, scores)


def _as_arrays(subset: Subset):
    points, scores, values = (np.asarray(t, dtype=np.float64) for t in subset)
    return points.reshape(values.shape[0], -1), scores.reshape(values.shape[0], -1), values.reshape(-1)


def default_nugget(gram: np.ndarray) -> float:
    return NUGGET_SCALE * float(np.trace(gram)) / gram.shape[0]


def _system(support: Subset, lengthscale: float, nugget: Optional[float], bc: BoundaryCorrection):
    points, scores, values = _as_arrays(support)
    if values.shape[0] == 0:
        raise EmptySetError("support set is empty")
    if lengthscale <= 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    gram = stein_gram(lengthscale, points, scores, bc=bc)
    tau = default_nugget(gram) if nugget is None else float(nugget)
    if tau < 0:
        raise ValueError(f"nugget must be non-negative, got {tau}")
    return points, scores, values, gram + tau * np.eye(values.shape[0]), tau


def cf_fit(
        support: Subset,
        lengthscale: float,
        nugget: Optional[float] = None,
        bc: BoundaryCorrection = BoundaryCorrection(),
) -> CFModel:
    """
    Подгонка control functional по S. β₀ = 1ᵀA⁻¹y / 1ᵀA⁻¹1, A = K₀ + τI.
    Решение через симметричное разложение с пивотированием.
    """
    points, scores, values, system, tau = _system(support, lengthscale, nugget, bc)
    m = values.shape[0]
    rhs = np.column_stack([values, np.ones(m)])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            solution = linalg.solve(system, rhs, assume_a="sym")
    except (linalg.LinAlgError, linalg.LinAlgWarning) as e:
        raise SingularSystemError(f"Stein Gram system is singular: {e}", condition=float(np.linalg.cond(system))) from e

    a_inv_y, a_inv_one = solution[:, 0], solution[:, 1]
    beta0 = float(a_inv_y.sum() / a_inv_one.sum())
    coefficients = a_inv_y - beta0 * a_inv_one
    return CFModel(
        points=points,
        scores=scores,
        values=values,
        lengthscale=float(lengthscale),
        nugget=tau,
        coefficients=coefficients,
        beta0=beta0,
        bc=bc,
    )


def cf_estimate(model: CFModel, query: Subset) -> Estimate:
    """
    β₀ + среднее по Q от (f − ĝ); слагаемые ядра Стейна имеют нулевое среднее, так что E_π[ĝ] = β₀.
    """
    points, scores, values = _as_arrays(query)
    if values.shape[0] == 0:
        raise EmptySetError("query set is empty")
    residuals = values - model.zero_mean_part(points, scores)
    return Estimate.from_samples(residuals)


def log_marginal_likelihood(
        support: Subset,
        lengthscale: float,
        nugget: Optional[float] = None,
        bc: BoundaryCorrection = BoundaryCorrection(),
) -> float:
    """
    −½ y_cᵀA⁻¹y_c − ½ log det A − (m/2) log 2π, y_c = y − β₀1. Через Холецкого.
    """
    _, _, values, system, _ = _system(support, lengthscale, nugget, bc)
    m = values.shape[0]
    try:
        factor = linalg.cho_factor(system, lower=True)
    except linalg.LinAlgError as e:
        raise SingularSystemError(f"Stein Gram matrix is not positive definite: {e}") from e
    a_inv_y = linalg.cho_solve(factor, values)
    a_inv_one = linalg.cho_solve(factor, np.ones(m))
    beta0 = a_inv_y.sum() / a_inv_one.sum()
    centered = values - beta0
    fit = centered @ linalg.cho_solve(factor, centered)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * fit - 0.5 * log_det - 0.5 * m * math.log(2.0 * math.pi))


def default_lengthscale_grid(points: np.ndarray, size: int = DEFAULT_GRID_SIZE, span=DEFAULT_GRID_SPAN) -> np.ndarray:
    """
    Лог-сетка [span₀, span₁]·медиана квадратов попарных расстояний.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    scale = float(np.median(pdist(points, "sqeuclidean"))) if points.shape[0] > 1 else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    return scale * np.logspace(np.log10(span[0]), np.log10(span[1]), size)


def tune_lengthscale(
        support: Subset,
        grid: Sequence[float],
        nugget: Optional[float] = None,
        bc: BoundaryCorrection = BoundaryCorrection(),
) -> float:
    """
    Перебор по сетке, максимум маргинального правдоподобия. При равенстве побеждает первый.
    """
    if len(grid) == 0:
        raise ValueError("lengthscale grid is empty")
    best, best_value = None, -math.inf
    for candidate in grid:
        try:
            value = log_marginal_likelihood(support, float(candidate), nugget, bc)
        except SingularSystemError:
            logger.warning("Skipping lengthscale %.4g: singular Stein Gram matrix", candidate)
            continue
        if not np.isfinite(value):
            continue
        if best is None or value > best_value:
            best, best_value = float(candidate), value
    if best is None:
        raise SingularSystemError("all lengthscale candidates gave singular Stein Gram matrices")
    return best
