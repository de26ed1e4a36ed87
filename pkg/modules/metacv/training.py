from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from . import autodiff
from .autodiff import ScalarProgram
from .errors import DimensionMismatchError, EmptySetError, NonFiniteError, NumericalAbort, UnsupportedModeError
from .estimators import Subset, TaskDataset, loss_fn
from .network import CVParameters, NetworkSpec, init_params, save_checkpoint
from .stein import SteinCV

logger = logging.getLogger("metacv.training")

RULE_KINDS = ("gd", "adam")
GRAD_MODES = ("exact", "first_order")
ETA_SCHEDULES = ("constant", "step_decay")

# η_{i+10} = 0.9·η_i
DECAY_FACTOR = 0.9
DECAY_EVERY = 10

TRACE_COLUMNS = ["iteration", "mean_outer_loss", "grad_norm_estimate", "wall_ms"]


# ============================
# Правила обновления
# ============================

@dataclass(frozen=True)
class AdamState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step: int = 0


@dataclass(frozen=True)
class UpdateRule:
    """
    gd: γ − α·∇; adam: стандартный шаг Adam с коррекцией смещения.
    Правило неизменяемо — update_step возвращает новое правило с обновлённым состоянием.
    """
    kind: str = "gd"
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: Optional[AdamState] = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown update rule '{self.kind}', expected one of {RULE_KINDS}")
        if self.alpha <= 0:
            raise ValueError(f"step size must be positive, got {self.alpha}")

    def fresh(self) -> "UpdateRule":
        return replace(self, state=None)

    def with_alpha(self, alpha: float) -> "UpdateRule":
        return replace(self, alpha=alpha)


def update_step(rule: UpdateRule, gamma: torch.Tensor, grad: torch.Tensor) -> Tuple[torch.Tensor, UpdateRule]:
    if gamma.shape != grad.shape:
        raise DimensionMismatchError(f"parameter shape {tuple(gamma.shape)} != gradient shape {tuple(grad.shape)}")
    if rule.kind == "gd":
        return gamma - rule.alpha * grad, rule

    state = rule.state or AdamState(torch.zeros_like(gamma), torch.zeros_like(gamma), 0)
    if state.first_moment.shape != gamma.shape:
        raise DimensionMismatchError("Adam state does not match the parameter length")
    step = state.step + 1
    first = rule.beta1 * state.first_moment + (1.0 - rule.beta1) * grad
    second = rule.beta2 * state.second_moment + (1.0 - rule.beta2) * grad * grad
    first_hat = first / (1.0 - rule.beta1 ** step)
    second_hat = second / (1.0 - rule.beta2 ** step)
    new_gamma = gamma - rule.alpha * first_hat / (torch.sqrt(second_hat) + rule.eps)
    return new_gamma, replace(rule, state=AdamState(first, second, step))


def _descend(loss: ScalarProgram, gamma: torch.Tensor, steps: int, rule: UpdateRule) -> torch.Tensor:
    for _ in range(steps):
        gradient = autodiff.grad_params(loss, gamma)
        gamma, rule = update_step(rule, gamma, gradient)
    return gamma


# ============================
# Конфигурация мета-обучения
# ============================

@dataclass(frozen=True)
class MetaConfig:
    """
    inner_steps — L, alpha — внутренний шаг, eta — мета-шаг, meta_batch_size — B,
    meta_iterations — I_tr, lam — штраф λ.
    """
    inner_steps: int = 1
    alpha: float = 0.01
    eta: float = 0.002
    eta_schedule: str = "constant"
    meta_batch_size: int = 5
    meta_iterations: int = 4000
    lam: float = 0.0
    grad_mode: str = "exact"
    inner_rule: str = "gd"
    outer_rule: str = "adam"
    seed: int = 0
    sigma_init: float = 0.01
    workers: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.alpha <= 0 or self.eta <= 0:
            raise ValueError("step sizes alpha and eta must be positive")
        if self.meta_batch_size < 1 or self.meta_iterations < 1:
            raise ValueError("meta_batch_size and meta_iterations must be >= 1")
        if self.lam < 0:
            raise ValueError(f"penalty lam must be >= 0, got {self.lam}")
        if self.eta_schedule not in ETA_SCHEDULES:
            raise ValueError(f"unknown eta_schedule '{self.eta_schedule}', expected one of {ETA_SCHEDULES}")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode '{self.grad_mode}', expected one of {GRAD_MODES}")
        if self.inner_rule not in RULE_KINDS or self.outer_rule not in RULE_KINDS:
            raise ValueError(f"update rules must be one of {RULE_KINDS}")
        if self.grad_mode == "exact" and self.inner_rule != "gd":
            raise UnsupportedModeError("grad_mode 'exact' requires inner_rule 'gd'")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def eta_at(self, iteration: int) -> float:
        if self.eta_schedule == "step_decay":
            return self.eta * DECAY_FACTOR ** (iteration // DECAY_EVERY)
        return self.eta

    def inner_update_rule(self) -> UpdateRule:
        return UpdateRule(kind=self.inner_rule, alpha=self.alpha)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    mean_outer_loss: float
    grad_norm_estimate: float
    wall_ms: float


@dataclass(frozen=True)
class MetaParameter:
    gamma_meta: CVParameters
    training_trace: List[TraceRow] = field(default_factory=list)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(row) for row in self.training_trace], columns=TRACE_COLUMNS)

    def smoothed(self, column: str = "grad_norm_estimate", window: int = 50) -> np.ndarray:
        """
        Скользящее среднее по окну — монитор стационарности ‖E_t[∇J_t(γᵢ)]‖.
        """
        return self.trace_frame()[column].rolling(window, min_periods=1).mean().to_numpy()


# ============================
# Neural-CV на одной задаче
# ============================

def train_neural_cv(
        cv: SteinCV,
        data: TaskDataset,
        epochs: int = 20,
        batch_size: int = 5,
        rule: UpdateRule = UpdateRule(kind="adam", alpha=0.002),
        lam: float = 0.0,
        seed: int = 0,
        sigma_init: float = 0.01,
) -> CVParameters:
    """
    Минимизирует J_S только по support-множеству, последовательными перемешанными мини-батчами.
    γ₀ стартует с MC-оценки по S.
    """
    support = data.support
    if len(support) == 0:
        raise EmptySetError("support set is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    params = init_params(cv.spec, sigma_init, float(support.values.mean()), seed)
    if epochs == 0:
        return params

    rng = np.random.default_rng([seed, 1])
    gamma = params.flat()
    rule = rule.fresh()
    m = len(support)
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(m))
        for start in range(0, m, batch_size):
            idx = order[start:start + batch_size]
            batch = Subset(support.points[idx], support.scores[idx], support.values[idx])
            try:
                gradient = autodiff.grad_params(loss_fn(cv, batch, lam), gamma)
            except NonFiniteError as e:
                raise NumericalAbort(f"Neural-CV training diverged: {e}", iteration=epoch) from e
            gamma, rule = update_step(rule, gamma, gradient)
    return CVParameters.from_flat(gamma)


# ============================
# Адаптация Meta-CV к новой задаче
# ============================

def adapt(
        cv: SteinCV,
        gamma_meta: CVParameters,
        support: Subset,
        steps: int,
        rule: UpdateRule,
        lam: float = 0.0,
) -> CVParameters:
    """
    L шагов оптимизатора на J_S, начиная с γ_meta. Состояние оптимизатора всегда новое.
    """
    if len(support) == 0:
        raise EmptySetError("support set is empty")
    if steps < 0:
        raise ValueError(f"number of adaptation steps must be >= 0, got {steps}")
    if steps == 0:
        return gamma_meta
    gamma = _descend(loss_fn(cv, support, lam), gamma_meta.flat(), steps, rule.fresh())
    return CVParameters.from_flat(gamma)


# ============================
# Мета-обучение Meta-CV
# ============================

def task_meta_gradient(
        cv: SteinCV,
        task: TaskDataset,
        gamma: torch.Tensor,
        config: MetaConfig,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (J_Q(γ_L), ∇_γ J_Q(γ_L)) для одной задачи: внутренние шаги по S, внешний лосс по Q.
    """
    inner = loss_fn(cv, task.support, config.lam)
    outer = loss_fn(cv, task.query, config.lam)
    if config.inner_steps == 0:
        return autodiff.value_and_grad_params(outer, gamma)
    if config.grad_mode == "exact":
        return autodiff.meta_value_and_grad_exact(
            inner, outer, gamma, config.alpha, config.inner_steps, inner_rule=config.inner_rule
        )
    adapted = _descend(inner, gamma, config.inner_steps, config.inner_update_rule())
    return autodiff.value_and_grad_params(outer, adapted)


def meta_train(
        cv_factory: Callable[[int], SteinCV],
        tasks: Sequence[TaskDataset],
        spec: NetworkSpec,
        config: MetaConfig,
        checkpoint_dir: Optional[Union[str, Path]] = None,
        metadata: Optional[dict] = None,
        progress: bool = False,
        trace_path: Optional[Union[str, Path]] = None,
) -> MetaParameter:
    """
    На каждой итерации: B индексов задач равномерно с возвращением, мета-градиент по каждой,
    усреднение и внешний шаг. Состояние внешнего Adam сохраняется между итерациями.
    """
    if not tasks:
        raise EmptySetError("meta-training needs at least one task")
    for index, task in enumerate(tasks):
        if len(task.support) == 0 or len(task.query) == 0:
            raise EmptySetError(f"task {index} has an empty support or query set")

    rng = np.random.default_rng(config.seed)
    gamma = init_params(spec, config.sigma_init, 0.0, config.seed).flat()
    outer_rule = UpdateRule(kind=config.outer_rule, alpha=config.eta)
    trace: List[TraceRow] = []
    if trace_path is None and checkpoint_dir:
        trace_path = Path(checkpoint_dir) / "training_trace.csv"
    trace_path = Path(trace_path) if trace_path else None
    if trace_path is not None and trace_path.exists():
        trace_path.unlink()
    flushed = 0

    def one_task(index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return task_meta_gradient(cv_factory(index), tasks[index], gamma, config)

    logger.info(
        "Meta-training: %d tasks, I_tr=%d, B=%d, L=%d, mode=%s, inner=%s, outer=%s",
        len(tasks), config.meta_iterations, config.meta_batch_size, config.inner_steps,
        config.grad_mode, config.inner_rule, config.outer_rule,
    )
    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for iteration in tqdm(range(config.meta_iterations), desc="meta-train", disable=not progress):
            started = time.perf_counter()
            batch = rng.integers(0, len(tasks), size=config.meta_batch_size).tolist()
            try:
                results = list(executor.map(one_task, batch)) if executor else [one_task(i) for i in batch]
            except NonFiniteError as e:
                raise NumericalAbort(f"non-finite meta-gradient: {e}", iteration=iteration) from e

            losses = torch.stack([value for value, _ in results])
            meta_grad = torch.stack([g for _, g in results]).mean(dim=0)
            if not bool(torch.isfinite(meta_grad).all()) or not bool(torch.isfinite(losses).all()):
                raise NumericalAbort("non-finite meta-gradient", iteration=iteration)

            gamma, outer_rule = update_step(outer_rule.with_alpha(config.eta_at(iteration)), gamma, meta_grad)
            row = TraceRow(
                iteration=iteration,
                mean_outer_loss=float(losses.mean()),
                grad_norm_estimate=float(torch.linalg.vector_norm(meta_grad)),
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            trace.append(row)
            logger.debug("iter %d loss %.6e grad-norm %.6e", iteration, row.mean_outer_loss, row.grad_norm_estimate)

            if checkpoint_dir and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    Path(checkpoint_dir) / f"meta_{iteration + 1:06d}.pt",
                    spec,
                    CVParameters.from_flat(gamma),
                    {**(metadata or {}), "seed": config.seed, "iteration": iteration + 1},
                )
                flushed = _append_trace(trace_path, trace, flushed)
    finally:
        if executor:
            executor.shutdown(wait=True)

    if trace_path is not None:
        _append_trace(trace_path, trace, flushed)
    return MetaParameter(gamma_meta=CVParameters.from_flat(gamma), training_trace=trace)


def _append_trace(path: Path, trace: List[TraceRow], flushed: int) -> int:
    rows = trace[flushed:]
    if not rows:
        return flushed
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([vars(row) for row in rows], columns=TRACE_COLUMNS)
    frame.to_csv(path, mode="a", header=flushed == 0, index=False, float_format="%.10e")
    return len(trace)
