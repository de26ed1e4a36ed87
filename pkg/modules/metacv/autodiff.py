from __future__ import annotations

from typing import Callable, Sequence, Tuple, Union

import numpy as np
import torch
from torch.func import grad, grad_and_value, jacfwd

from .errors import DimensionMismatchError, NonFiniteError, UnsupportedModeError

"""
Дифференцирование для трёх уровней вложенности, которые нужны методу:
  1) производные сети по входу (дивергенция) — forward-mode, d проходов (jacfwd);
  2) градиент лосса, внутри которого уже есть дивергенция, по параметрам — reverse поверх forward;
  3) мета-градиент через L развёрнутых шагов градиентного спуска — reverse поверх reverse.

Всё построено на torch.func: функции чистые, ленты создаются на каждый вызов,
поэтому вызывать их можно из нескольких потоков одновременно.
Вычисления только в float64.
"""

DTYPE = torch.float64

# (параметры, вход) -> скаляр или вектор
DifferentiableProgram = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
# параметры -> скаляр
ScalarProgram = Callable[[torch.Tensor], torch.Tensor]

TensorLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]


def as_tensor(value: TensorLike) -> torch.Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def ensure_finite(value: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteError(f"non-finite value in {what}")
    return value


def _flat_params(params: TensorLike) -> torch.Tensor:
    # CVParameters тоже принимаем: у них есть .flat()
    if hasattr(params, "flat"):
        params = params.flat()
    params = as_tensor(params)
    if params.dim() != 1:
        raise DimensionMismatchError(f"parameters must be a vector, got shape {tuple(params.shape)}")
    return params


def _program_params(params: TensorLike) -> torch.Tensor:
    # программе нужны только веса сети, γ₀ в неё не входит
    if hasattr(params, "weights"):
        params = params.weights
    return _flat_params(params)


def _scalar(loss: ScalarProgram) -> ScalarProgram:
    def wrapped(params: torch.Tensor) -> torch.Tensor:
        out = loss(params)
        if out.dim() != 0:
            raise ValueError(f"loss must be scalar-valued, got shape {tuple(out.shape)}")
        return out

    return wrapped


# ============================
# Уровень 1: производные по входу
# ============================

def jacobian_inputs(prog: DifferentiableProgram, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """
    Якобиан ∂u/∂x без проверок — для использования внутри дифференцируемых программ.
    """
    return jacfwd(lambda z: prog(params, z))(x)


def divergence(prog: DifferentiableProgram, params: torch.Tensor, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Возвращает (∇·u(x), u(x)) за один forward-mode проход по d направлениям.
    Программа должна отображать R^d -> R^d.
    """
    if hasattr(params, "weights"):
        params = params.weights

    def field(z: torch.Tensor):
        u = prog(params, z)
        return u, u

    jac, u = jacfwd(field, has_aux=True)(x)
    if u.shape != x.shape:
        raise DimensionMismatchError(f"vector field maps R^{x.shape[-1]} to shape {tuple(u.shape)}")
    return torch.diagonal(jac).sum(), u


def grad_inputs(prog: DifferentiableProgram, params: TensorLike, x: TensorLike) -> torch.Tensor:
    """
    Точный якобиан выхода программы по входу x, матрица (out_dim, d).
    След этой матрицы (для квадратного случая) — дивергенция.
    """
    params = _program_params(params)
    x = as_tensor(x)
    if x.dim() != 1:
        raise DimensionMismatchError(f"input must be a vector, got shape {tuple(x.shape)}")
    jac = jacobian_inputs(prog, params, x)
    return ensure_finite(jac.reshape(-1, x.shape[0]), "input Jacobian")


# ============================
# Уровень 2: градиенты по параметрам
# ============================

def value_and_grad_params(loss: ScalarProgram, params: TensorLike) -> Tuple[torch.Tensor, torch.Tensor]:
    params = _flat_params(params)
    gradient, value = grad_and_value(_scalar(loss))(params)
    ensure_finite(value, "loss value")
    ensure_finite(gradient, "parameter gradient")
    return value, gradient


def grad_params(loss: ScalarProgram, params: TensorLike) -> torch.Tensor:
    """
    Точный градиент скалярного лосса по параметрам (длина p+1).
    Лосс может внутри вызывать производные по входу (смешанный второй порядок).
    """
    return value_and_grad_params(loss, params)[1]


# ============================
# Уровень 3: мета-градиенты
# ============================

def unrolled_objective(inner_loss: ScalarProgram, outer_loss: ScalarProgram, alpha: float, steps: int) -> ScalarProgram:
    """
    γ -> outer_loss(γ_L), где γ_j = γ_{j-1} − α∇inner_loss(γ_{j-1}).
    Все промежуточные итерации остаются в графе (память O(L·p)).
    """
    inner_grad = grad(_scalar(inner_loss))

    def objective(params: torch.Tensor) -> torch.Tensor:
        adapted = params
        for _ in range(steps):
            adapted = adapted - alpha * inner_grad(adapted)
        return outer_loss(adapted)

    return objective


def _check_meta_args(alpha: float, steps: int, inner_rule: str) -> None:
    if inner_rule != "gd":
        raise UnsupportedModeError(
            f"exact meta-gradient is defined only for plain gradient descent inner updates, got '{inner_rule}'"
        )
    if steps < 1:
        raise ValueError(f"number of inner steps must be >= 1, got {steps}")
    if alpha < 0:
        raise ValueError(f"inner step size must be non-negative, got {alpha}")


def meta_value_and_grad_exact(
        inner_loss: ScalarProgram,
        outer_loss: ScalarProgram,
        params: TensorLike,
        alpha: float,
        steps: int,
        inner_rule: str = "gd",
) -> Tuple[torch.Tensor, torch.Tensor]:
    _check_meta_args(alpha, steps, inner_rule)
    return value_and_grad_params(unrolled_objective(inner_loss, outer_loss, alpha, steps), params)


def meta_grad_exact(
        inner_loss: ScalarProgram,
        outer_loss: ScalarProgram,
        params: TensorLike,
        alpha: float,
        steps: int,
        inner_rule: str = "gd",
) -> torch.Tensor:
    """
    ∇_γ outer_loss(γ − α∇inner_loss(γ), повторённое steps раз), со всеми членами второго порядка.
    """
    return meta_value_and_grad_exact(inner_loss, outer_loss, params, alpha, steps, inner_rule)[1]


def meta_grad_first_order(
        inner_loss: ScalarProgram,
        outer_loss: ScalarProgram,
        params: TensorLike,
        alpha: float,
        steps: int,
) -> torch.Tensor:
    """
    Приближение первого порядка: якобиан внутреннего обновления считаем единичным,
    то есть возвращаем ∇outer_loss в адаптированной точке.
    """
    adapted = _flat_params(params)
    for _ in range(steps):
        adapted = adapted - alpha * grad_params(inner_loss, adapted)
    return grad_params(outer_loss, adapted)


# ============================
# Оракул для тестов
# ============================

def finite_diff_grad(fn: Callable[[torch.Tensor], TensorLike], point: TensorLike, step: float = 1e-5) -> torch.Tensor:
    """
    Центральные конечные разности: (fn(p + h e_i) − fn(p − h e_i)) / 2h.
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    point = as_tensor(point).reshape(-1)
    estimate = torch.empty_like(point)
    for i in range(point.shape[0]):
        shift = torch.zeros_like(point)
        shift[i] = step
        upper = float(fn(point + shift))
        lower = float(fn(point - shift))
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        estimate[i] = (upper - lower) / (2.0 * step)
    return estimate
