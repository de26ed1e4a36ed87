from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import ARTIFACT_VERSION, DEFAULT_THREADS, RESULTS_DB_NAME
from modules.database.database import Database, EstimatorSummary, TaskOutcome
from modules.metacv.control_functionals import cf_estimate, cf_fit, default_lengthscale_grid, tune_lengthscale
from modules.metacv.errors import ConfigError, MetaCVError, NumericalAbort
from modules.metacv.estimators import Estimate, cv_estimate, mc_estimate, task_errors
from modules.metacv.network import load_checkpoint, save_checkpoint
from modules.metacv.stein import SteinCV
from modules.metacv.training import MetaParameter, UpdateRule, adapt, meta_train, train_neural_cv
from modules.task_environments.ode import OdeEnvironment, sample_ode_tasks
from modules.task_environments.oscillatory import OscillatoryEnvironment, sample_oscillatory_tasks
from modules.task_environments.records import TaskRecord, task_seed
from modules.task_environments.task_bundle import write_task_bundle

from .experiment_config import ESTIMATORS, ExperimentConfig

logger = logging.getLogger("harness")

SWEEP_AXES = ("N", "L", "B", "I_tr", "d")

# Колонки CSV с результатами
PER_TASK_COLUMNS = [
    "estimator", "task_index", "estimate", "std_error", "truth", "abs_error", "status", "error", "wall_ms",
]
SUMMARY_COLUMNS = [
    "axis", "axis_value", "estimator", "n_tasks", "n_failed", "mae", "mae_ci95", "total_wall_s",
    "lam", "ncv_lam", "seed", "config_hash", "training_hash", "artifact_version",
]
SWEEP_COLUMNS = ["axis", "axis_value", "estimator", "mae", "mae_ci95", "n_failed", "config_hash", "training_hash", "run_dir"]

FLOAT_FORMAT = "%.12e"

# Ошибки, которые изолируются на уровне (оценщик, задача)
ESTIMATOR_FAILURES = (MetaCVError, ArithmeticError, np.linalg.LinAlgError, ValueError, RuntimeError)


@dataclass(frozen=True)
class TrainedMeta:
    """
    γ_meta вместе с хэшем конфига, на котором он обучен. Для L-свипа один и тот же объект
    переиспользуется во всех прогонах.
    """
    meta: MetaParameter
    training_hash: str
    checkpoint: Optional[Path] = None


@dataclass(frozen=True)
class RunResult:
    run_dir: Path
    config: ExperimentConfig
    outcomes: Tuple[TaskOutcome, ...]
    summaries: Tuple[EstimatorSummary, ...]
    training_hash: str
    axis: str = "none"
    axis_value: Optional[float] = None
    trained: Optional[TrainedMeta] = None

    @property
    def partial(self) -> bool:
        return any(outcome.failed for outcome in self.outcomes)

    def summary(self, estimator: str) -> EstimatorSummary:
        for row in self.summaries:
            if row.estimator == estimator:
                return row
        raise KeyError(f"no summary for estimator '{estimator}'")


# ============================
# Задачи
# ============================

def generate_tasks(config: ExperimentConfig, namespace: str) -> List[TaskRecord]:
    e = config.experiment
    count = e.t_train if namespace == "train" else e.t_test
    if e.kind == "oscillatory":
        return sample_oscillatory_tasks(OscillatoryEnvironment(d=e.d), count, e.n_per_task, e.seed, namespace)
    env = OdeEnvironment(n_s=config.ode.n_s, n_s_truth=config.ode.n_s_truth)
    return sample_ode_tasks(env, count, e.n_per_task, e.seed, namespace)


# ============================
# Мета-обучение
# ============================

def make_run_dir(config: ExperimentConfig, out: Optional[Union[str, Path]] = None, name: Optional[str] = None) -> Path:
    root = Path(out or config.experiment.output_dir)
    if name is None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        name = f"{config.config_hash()[:10]}_{stamp}"
    run_dir = root / name
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    logger.info("Run directory: %s", run_dir)
    return run_dir


def train_meta_parameter(
        config: ExperimentConfig,
        train_tasks: Sequence[TaskRecord],
        run_dir: Optional[Path] = None,
        progress: bool = False,
) -> TrainedMeta:
    """
    Мета-обучение на обучающих задачах. Финальный γ_meta сохраняется в checkpoints/meta_final.pt.
    """
    cv = config.stein_cv()
    spec = config.network_spec()
    metadata = {
        "config_hash": config.config_hash(),
        "training_hash": config.training_hash(),
        "seed": config.experiment.seed,
        "artifact_version": ARTIFACT_VERSION,
    }
    checkpoint_dir = run_dir / "checkpoints" if run_dir else None
    started = time.perf_counter()
    meta = meta_train(
        lambda index: cv,
        [record.dataset for record in train_tasks],
        spec,
        config.meta_config(),
        checkpoint_dir=checkpoint_dir,
        metadata=metadata,
        progress=progress,
        trace_path=run_dir / "training_trace.csv" if run_dir else None,
    )
    logger.info("Meta-training finished in %.1f s", time.perf_counter() - started)
    checkpoint = None
    if checkpoint_dir is not None:
        checkpoint = save_checkpoint(
            checkpoint_dir / "meta_final.pt",
            spec,
            meta.gamma_meta,
            {**metadata, "iteration": config.meta.meta_iterations},
        )
    return TrainedMeta(meta=meta, training_hash=config.training_hash(), checkpoint=checkpoint)


def load_trained_meta(path: Union[str, Path], config: ExperimentConfig) -> TrainedMeta:
    checkpoint = load_checkpoint(path)
    if checkpoint.spec != config.network_spec():
        raise ConfigError(
            f"checkpoint {path} holds network {checkpoint.spec}, config asks for {config.network_spec()}",
            "network",
        )
    training_hash = str(checkpoint.metadata.get("training_hash", config.training_hash()))
    logger.info("Loaded meta-parameter from %s", path)
    return TrainedMeta(meta=MetaParameter(gamma_meta=checkpoint.params), training_hash=training_hash, checkpoint=Path(path))


def run_meta_training(
        config: ExperimentConfig,
        out: Optional[Union[str, Path]] = None,
        progress: bool = False,
        dump_tasks: bool = False,
) -> TrainedMeta:
    """
    Фаза meta-train: задачи, обучение, чекпоинт. NumericalAbort пробрасывается наверх.
    """
    run_dir = make_run_dir(config, out)
    train_tasks = generate_tasks(config, "train")
    if dump_tasks:
        write_task_bundle(run_dir / "train_tasks.jsonl", train_tasks)
    return train_meta_parameter(config, train_tasks, run_dir, progress)


# ============================
# Оценщики на одной тестовой задаче
# ============================

def _estimators(config: ExperimentConfig, cv: SteinCV, record: TaskRecord, trained: Optional[TrainedMeta]):
    data = record.dataset

    def mc() -> Estimate:
        return mc_estimate(data.query.values)

    def ncv() -> Estimate:
        settings = config.neural_cv
        params = train_neural_cv(
            cv,
            data,
            epochs=settings.epochs,
            batch_size=settings.batch_size,
            rule=UpdateRule(kind=settings.rule, alpha=settings.alpha),
            lam=settings.lam,
            seed=task_seed(config.experiment.seed, record.namespace, record.index),
            sigma_init=config.network.sigma_init,
        )
        return cv_estimate(cv, params, data)

    def cf() -> Estimate:
        support = data.support
        grid = default_lengthscale_grid(
            support.points.numpy(), config.cf.grid_size, (config.cf.grid_min, config.cf.grid_max)
        )
        bc = config.boundary()
        lengthscale = tune_lengthscale(support, grid, config.cf.nugget, bc)
        return cf_estimate(cf_fit(support, lengthscale, config.cf.nugget, bc), data.query)

    def mcv() -> Estimate:
        if trained is None:
            raise NumericalAbort("no meta-trained parameter available")
        rule = UpdateRule(kind=config.meta.inner_rule, alpha=config.effective_alpha())
        adapted = adapt(cv, trained.meta.gamma_meta, data.support, config.meta.inner_steps, rule, config.meta.lam)
        return cv_estimate(cv, adapted, data)

    return {"mc": mc, "ncv": ncv, "cf": cf, "mcv": mcv}


def _run_one(name: str, estimator: Callable[[], Estimate], record: TaskRecord) -> TaskOutcome:
    truth = record.truth.value
    started = time.perf_counter()
    try:
        estimate = estimator()
    except ESTIMATOR_FAILURES as e:
        wall_ms = (time.perf_counter() - started) * 1000.0
        logger.warning("Estimator %s failed on test task %d: %s", name, record.index, e)
        return TaskOutcome(name, record.index, None, None, truth, None, "failed", str(e), wall_ms)
    wall_ms = (time.perf_counter() - started) * 1000.0
    return TaskOutcome(
        estimator=name,
        task_index=record.index,
        estimate=estimate.value,
        std_error=estimate.std_error,
        truth=truth,
        abs_error=abs(estimate.value - truth),
        wall_ms=wall_ms,
    )


def evaluate_task(
        config: ExperimentConfig,
        cv: SteinCV,
        record: TaskRecord,
        estimators: Sequence[str],
        trained: Optional[TrainedMeta] = None,
        meta_failure: Optional[str] = None,
) -> List[TaskOutcome]:
    """
    Все выбранные оценщики на одной задаче. Падение одного оценщика не мешает остальным.
    """
    available = _estimators(config, cv, record, trained)
    outcomes = []
    for name in estimators:
        if name == "mcv" and meta_failure is not None:
            outcomes.append(TaskOutcome(name, record.index, None, None, record.truth.value, None, "failed", meta_failure))
            continue
        outcomes.append(_run_one(name, available[name], record))
    return outcomes


def summarize(outcomes: Sequence[TaskOutcome], estimators: Sequence[str]) -> List[EstimatorSummary]:
    summaries = []
    for name in estimators:
        rows = [o for o in outcomes if o.estimator == name]
        ok = [o for o in rows if not o.failed]
        mae = ci95 = None
        if ok:
            errors = task_errors(
                [Estimate(o.estimate, o.std_error, 1, 0.0) for o in ok],
                [o.truth for o in ok],
            )
            mae, ci95 = errors.mae, errors.mae_ci95
        summaries.append(EstimatorSummary(
            estimator=name,
            n_tasks=len(rows),
            n_failed=len(rows) - len(ok),
            mae=mae,
            mae_ci95=ci95,
            total_wall_s=sum(o.wall_ms for o in rows) / 1000.0,
        ))
    return summaries


# ============================
# Прогон целиком
# ============================

def run_experiment(
        config: ExperimentConfig,
        estimators: Optional[Sequence[str]] = None,
        out: Optional[Union[str, Path]] = None,
        threads: Optional[int] = None,
        checkpoint: Optional[Union[str, Path]] = None,
        trained: Optional[TrainedMeta] = None,
        axis: str = "none",
        axis_value: Optional[float] = None,
        progress: bool = False,
        dump_tasks: bool = False,
        run_name: Optional[str] = None,
) -> RunResult:
    """
    (1) обучающие задачи и мета-обучение (если нужен mcv и γ_meta не передан),
    (2) тестовые задачи из отдельного пространства сидов,
    (3) все оценщики по каждой задаче, (4) MAE ± CI, (5) файлы результатов.
    """
    estimators = tuple(estimators or config.estimators)
    unknown = [name for name in estimators if name not in ESTIMATORS]
    if unknown or not estimators:
        raise ConfigError(f"unknown estimators {unknown}, expected a subset of {ESTIMATORS}", "estimators")
    threads = threads or DEFAULT_THREADS
    run_dir = make_run_dir(config, out, run_name)
    cv = config.stein_cv()

    meta_failure = None
    if "mcv" in estimators and trained is None:
        if checkpoint is not None:
            trained = load_trained_meta(checkpoint, config)
        else:
            train_tasks = generate_tasks(config, "train")
            if dump_tasks:
                write_task_bundle(run_dir / "train_tasks.jsonl", train_tasks)
            try:
                trained = train_meta_parameter(config, train_tasks, run_dir, progress)
            except NumericalAbort as e:
                logger.error("Meta-training aborted, Meta-CV rows are marked failed: %s", e)
                meta_failure = f"meta-training aborted: {e}"
    training_hash = trained.training_hash if trained else config.training_hash()

    test_tasks = generate_tasks(config, "test")
    if dump_tasks:
        write_task_bundle(run_dir / "test_tasks.jsonl", test_tasks)

    def one(record: TaskRecord) -> List[TaskOutcome]:
        return evaluate_task(config, cv, record, estimators, trained, meta_failure)

    logger.info("Evaluating %s on %d test tasks (%d threads)", ",".join(estimators), len(test_tasks), threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            per_task = list(tqdm(executor.map(one, test_tasks), total=len(test_tasks), desc="evaluate", disable=not progress))
    else:
        per_task = [one(record) for record in tqdm(test_tasks, desc="evaluate", disable=not progress)]

    # порядок строк: оценщик, затем индекс задачи
    outcomes = tuple(
        outcome for name in estimators for rows in per_task for outcome in rows if outcome.estimator == name
    )
    summaries = tuple(summarize(outcomes, estimators))
    result = RunResult(
        run_dir=run_dir,
        config=config,
        outcomes=outcomes,
        summaries=summaries,
        training_hash=training_hash,
        axis=axis,
        axis_value=axis_value,
        trained=trained,
    )
    write_results(result)
    for row in summaries:
        logger.info(
            "%-4s MAE %s ± %s (%d/%d failed, %.2f s)",
            row.estimator,
            "n/a" if row.mae is None else f"{row.mae:.4e}",
            "n/a" if row.mae_ci95 is None else f"{row.mae_ci95:.2e}",
            row.n_failed, row.n_tasks, row.total_wall_s,
        )
    return result


def write_results(result: RunResult) -> None:
    config = result.config
    common = {
        "axis": result.axis,
        "axis_value": result.axis_value,
        "lam": config.meta.lam,
        "ncv_lam": config.neural_cv.lam,
        "seed": config.experiment.seed,
        "config_hash": config.config_hash(),
        "training_hash": result.training_hash,
        "artifact_version": ARTIFACT_VERSION,
    }
    per_task = pd.DataFrame([vars(o) for o in result.outcomes], columns=PER_TASK_COLUMNS)
    per_task.to_csv(result.run_dir / "per_task.csv", index=False, float_format=FLOAT_FORMAT)
    summary = pd.DataFrame([{**common, **vars(s)} for s in result.summaries], columns=SUMMARY_COLUMNS)
    summary.to_csv(result.run_dir / "summary.csv", index=False, float_format=FLOAT_FORMAT)

    database = Database(f"sqlite:///{(result.run_dir / RESULTS_DB_NAME).resolve()}")
    try:
        database.migrate()
        database.save_run(
            config_hash=common["config_hash"],
            training_hash=result.training_hash,
            kind=config.experiment.kind,
            seed=config.experiment.seed,
            lam=config.meta.lam,
            ncv_lam=config.neural_cv.lam,
            artifact_version=ARTIFACT_VERSION,
            config_yaml=config.to_yaml(),
            summaries=result.summaries,
            outcomes=result.outcomes,
            trace=result.trained.meta.training_trace if result.trained else (),
            axis=result.axis,
            axis_value=result.axis_value,
        )
    finally:
        database.dispose()


# ============================
# Свипы
# ============================

def _axis_config(config: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    as_int = int(value)
    if as_int != value or as_int < 0:
        raise ConfigError(f"sweep values for axis {axis} must be non-negative integers, got {value}", "sweep.values")
    if axis == "N":
        return config.override("experiment", n_per_task=as_int)
    if axis == "L":
        return config.override("meta", inner_steps=as_int)
    if axis == "B":
        return config.override("meta", meta_batch_size=as_int)
    if axis == "I_tr":
        return config.override("meta", meta_iterations=as_int)
    if axis == "d":
        return config.override("experiment", d=as_int)
    raise ConfigError(f"unknown sweep axis '{axis}', expected one of {SWEEP_AXES}", "sweep.axis")


def sweep(
        config: ExperimentConfig,
        axis: str,
        values: Sequence[float],
        estimators: Optional[Sequence[str]] = None,
        out: Optional[Union[str, Path]] = None,
        threads: Optional[int] = None,
        progress: bool = False,
) -> Dict[float, RunResult]:
    """
    run_experiment на каждое значение оси. Ось L меняет только адаптацию на тесте,
    поэтому γ_meta обучается один раз по базовому конфигу и переиспользуется.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis '{axis}', expected one of {SWEEP_AXES}", "sweep.axis")
    if not values:
        raise ConfigError("sweep needs at least one value", "sweep.values")
    configs = [(value, _axis_config(config, axis, value)) for value in values]
    estimators = tuple(estimators or config.estimators)

    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    sweep_dir = Path(out or config.experiment.output_dir) / f"sweep_{axis}_{config.config_hash()[:10]}_{stamp}"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    shared = None
    if axis == "L" and "mcv" in estimators:
        base_dir = make_run_dir(config, sweep_dir, "meta_train")
        shared = train_meta_parameter(config, generate_tasks(config, "train"), base_dir, progress)

    results: Dict[float, RunResult] = {}
    for value, value_config in configs:
        logger.info("Sweep %s = %s", axis, value)
        results[value] = run_experiment(
            value_config,
            estimators=estimators,
            out=sweep_dir,
            threads=threads,
            trained=shared,
            axis=axis,
            axis_value=float(value),
            progress=progress,
            run_name=f"{axis}_{value}",
        )

    rows = [
        {
            "axis": axis,
            "axis_value": float(value),
            "estimator": s.estimator,
            "mae": s.mae,
            "mae_ci95": s.mae_ci95,
            "n_failed": s.n_failed,
            "config_hash": result.config.config_hash(),
            "training_hash": result.training_hash,
            "run_dir": result.run_dir.name,
        }
        for value, result in results.items()
        for s in result.summaries
    ]
    pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(sweep_dir / "sweep.csv", index=False, float_format=FLOAT_FORMAT)
    logger.info("Sweep results written to %s", sweep_dir / "sweep.csv")
    return results
