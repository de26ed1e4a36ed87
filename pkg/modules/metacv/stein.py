from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch
from torch.func import vmap

from . import autodiff
from .autodiff import TensorLike, as_tensor, ensure_finite
from .errors import DimensionMismatchError, NonFiniteError
from .network import BoundaryCorrection, CVParameters, NetworkSpec, network_program

# x ↦ ∇log π(x). Должна работать и на одной точке (d,), и на батче (n, d)
ScoreFunction = Callable[[torch.Tensor], torch.Tensor]


def gaussian_score(x):
    """
    Скор стандартного нормального распределения: −x.
    """
    return -x


def zero_score(x):
    """
    Скор равномерной плотности: тождественный ноль (границу куба закрывает δ(x)).
    """
    return x * 0.0


@dataclass(frozen=True)
class SteinCV:
    spec: NetworkSpec
    bc: BoundaryCorrection
    score: ScoreFunction

    @property
    def program(self) -> autodiff.DifferentiableProgram:
        return network_program(self.spec, self.bc)

    def score_at(self, points: torch.Tensor) -> torch.Tensor:
        """
        Скор в тех же точках, где считается оператор; форма должна совпадать с points.
        """
        if points.shape[-1] != self.spec.input_dim:
            raise DimensionMismatchError(
                f"points have dimension {points.shape[-1]}, network input dimension is {self.spec.input_dim}"
            )
        scores = as_tensor(self.score(points))
        if scores.shape != points.shape:
            raise DimensionMismatchError(f"score output has shape {tuple(scores.shape)} at points of shape {tuple(points.shape)}")
        return scores


# ============================
# Оператор Ланжевена–Стейна
# ============================

def _weights(weights) -> torch.Tensor:
    if isinstance(weights, CVParameters):
        return weights.weights
    return as_tensor(weights)


def _stein_point(cv: SteinCV, weights: torch.Tensor, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    div, u = autodiff.divergence(cv.program, weights, x)
    return torch.dot(u, s) + div


def stein_values(cv: SteinCV, weights: torch.Tensor, points: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """
    g_{γ1:p}(xᵢ) для батча точек (n, d) с заранее посчитанными скорами (n, d).
    Дифференцируема по weights, используется внутри лоссов.
    """
    return vmap(lambda x, s: _stein_point(cv, weights, x, s))(points, scores)


def stein_apply(cv: SteinCV, weights: TensorLike, x: TensorLike) -> float:
    """
    S_π[u](x) = u(x)·∇log π(x) + ∇·u(x) в одной точке.
    """
    x = as_tensor(x)
    s = cv.score_at(x)
    if not bool(torch.isfinite(s).all()):
        raise NonFiniteError(f"non-finite score at x = {x.tolist()}")
    value = _stein_point(cv, _weights(weights), x, s)
    return float(ensure_finite(value, "Stein operator"))


def stein_apply_batch(cv: SteinCV, weights: TensorLike, points: TensorLike, scores: Optional[TensorLike] = None) -> torch.Tensor:
    points = as_tensor(points)
    scores = cv.score_at(points) if scores is None else as_tensor(scores)
    if not bool(torch.isfinite(scores).all()):
        raise NonFiniteError("non-finite score in batch")
    with torch.no_grad():
        values = stein_values(cv, _weights(weights), points, scores)
    return ensure_finite(values, "Stein operator")


def cv_value(cv: SteinCV, params: CVParameters, x: TensorLike) -> float:
    """
    g(x; γ) = γ₀ + g_{γ1:p}(x); E_π[g] = γ₀.
    """
    return params.gamma0 + stein_apply(cv, params.weights, x)


# ============================
# Ядро Стейна для control functionals
# ============================

def boundary_factor_and_grad(bc: BoundaryCorrection, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    δ(x) и ∇δ(x) для батча (n, d).
    """
    n, d = points.shape
    if bc.kind == "none":
        return np.ones(n), np.zeros((n, d))
    factors = points * (1.0 - points)
    value = np.prod(factors, axis=1)
    gradient = np.empty((n, d))
    for j in range(d):
        gradient[:, j] = (1.0 - 2.0 * points[:, j]) * np.prod(np.delete(factors, j, axis=1), axis=1)
    return value, gradient


def stein_gram(
        lengthscale: float,
        x: np.ndarray,
        score_x: np.ndarray,
        y: Optional[np.ndarray] = None,
        score_y: Optional[np.ndarray] = None,
        bc: BoundaryCorrection = BoundaryCorrection(),
) -> np.ndarray:
    """
    Матрица k₀(xᵢ, yⱼ) для базового ядра K(x, y) = δ(x)δ(y)·exp(−‖x−y‖²/2v):

        k₀ = ∇ₓ·∇ᵧK + ∇ₓK·s(y) + ∇ᵧK·s(x) + K·s(x)·s(y)

    При bc = none δ ≡ 1 и это обычное RBF-ядро Стейна.
    """
    if lengthscale <= 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    score_x = np.atleast_2d(np.asarray(score_x, dtype=np.float64))
    if y is None:
        y, score_y = x, score_x
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    score_y = np.atleast_2d(np.asarray(score_y, dtype=np.float64))
    d = x.shape[1]
    if y.shape[1] != d or score_x.shape != x.shape or score_y.shape != y.shape:
        raise DimensionMismatchError("points and scores must share the same dimension")

    v = float(lengthscale)
    diff = x[:, None, :] - y[None, :, :]
    sq = np.sum(diff ** 2, axis=2)
    k = np.exp(-sq / (2.0 * v))
    grad_x_k = -diff / v * k[..., None]
    grad_y_k = diff / v * k[..., None]
    trace_xy_k = (d / v - sq / v ** 2) * k

    a_x, ga_x = boundary_factor_and_grad(bc, x)
    a_y, ga_y = boundary_factor_and_grad(bc, y)

    div_div = (
            (ga_x @ ga_y.T) * k
            + a_y[None, :] * np.einsum("nd,nmd->nm", ga_x, grad_y_k)
            + a_x[:, None] * np.einsum("md,nmd->nm", ga_y, grad_x_k)
            + np.outer(a_x, a_y) * trace_xy_k
    )
    grad_x_big = a_y[None, :, None] * (ga_x[:, None, :] * k[..., None] + a_x[:, None, None] * grad_x_k)
    grad_y_big = a_x[:, None, None] * (ga_y[None, :, :] * k[..., None] + a_y[None, :, None] * grad_y_k)

    return (
            div_div
            + np.einsum("nmd,md->nm", grad_x_big, score_y)
            + np.einsum("nmd,nd->nm", grad_y_big, score_x)
            + np.outer(a_x, a_y) * k * (score_x @ score_y.T)
    )


def stein_kernel(
        lengthscale: float,
        score: ScoreFunction,
        x: TensorLike,
        x_prime: TensorLike,
        bc: BoundaryCorrection = BoundaryCorrection(),
) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    x_prime = np.asarray(x_prime, dtype=np.float64).reshape(1, -1)
    return float(stein_gram(lengthscale, x, score(x), x_prime, score(x_prime), bc=bc)[0, 0])
