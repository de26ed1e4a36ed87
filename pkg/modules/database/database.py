from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Generator, Optional, Sequence
import logging
from sqlalchemy import (
    DateTime,
    Float,
    ForeignKey,
    Integer,
    String,
    Text,
    Index,
    create_engine,
    func,
    select,
)
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column, sessionmaker

from modules.metacv.training import TraceRow

logger = logging.getLogger("database")


# ============================
# ORM: база и модели таблиц
# ============================

class Base(DeclarativeBase):
    pass


class Run(Base):
    """
    Один прогон харнесса (одна точка свипа)
    """
    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    config_hash: Mapped[str] = mapped_column(String(64), nullable=False)
    training_hash: Mapped[str] = mapped_column(String(64), nullable=False)
    kind: Mapped[str] = mapped_column(String(20), nullable=False)  # oscillatory, ode
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    lam: Mapped[float] = mapped_column(Float, nullable=False)  # λ мета-обучения
    ncv_lam: Mapped[float] = mapped_column(Float, nullable=False)  # λ Neural-CV
    axis: Mapped[str] = mapped_column(String(20), nullable=False, default="none")  # none, N, L, B, I_tr, d
    axis_value: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    artifact_version: Mapped[str] = mapped_column(String(20), nullable=False)
    config_yaml: Mapped[str] = mapped_column(Text, nullable=False)
    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), nullable=False, default=func.now())

    __table_args__ = (
        Index("ix_runs_config_hash", "config_hash"),
        Index("ix_runs_axis", "axis"),
    )


class EstimatorSummaryRow(Base):
    """
    MAE по тестовым задачам для одного оценщика
    """
    __tablename__ = "estimator_summaries"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id", ondelete="CASCADE"), nullable=False)
    estimator: Mapped[str] = mapped_column(String(10), nullable=False)  # mc, ncv, cf, mcv
    n_tasks: Mapped[int] = mapped_column(Integer, nullable=False)
    n_failed: Mapped[int] = mapped_column(Integer, nullable=False, default=0)
    mae: Mapped[Optional[float]] = mapped_column(Float, nullable=True)  # NULL если все задачи упали
    mae_ci95: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    total_wall_s: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)

    __table_args__ = (
        Index("ix_estimator_summaries_run_id", "run_id"),
    )


class TaskResultRow(Base):
    """
    Оценка одного оценщика на одной тестовой задаче
    """
    __tablename__ = "task_results"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id", ondelete="CASCADE"), nullable=False)
    estimator: Mapped[str] = mapped_column(String(10), nullable=False)
    task_index: Mapped[int] = mapped_column(Integer, nullable=False)
    estimate: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    std_error: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    truth: Mapped[float] = mapped_column(Float, nullable=False)
    abs_error: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    status: Mapped[str] = mapped_column(String(10), nullable=False, default="ok")  # ok, failed
    error: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    wall_ms: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)

    __table_args__ = (
        Index("ix_task_results_run_id", "run_id"),
        Index("ix_task_results_run_estimator", "run_id", "estimator"),
    )


class TrainingTraceRow(Base):
    """
    Трасса мета-обучения: лосс и норма мета-градиента по итерациям
    """
    __tablename__ = "training_trace"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id", ondelete="CASCADE"), nullable=False)
    iteration: Mapped[int] = mapped_column(Integer, nullable=False)
    mean_outer_loss: Mapped[float] = mapped_column(Float, nullable=False)
    grad_norm_estimate: Mapped[float] = mapped_column(Float, nullable=False)
    wall_ms: Mapped[float] = mapped_column(Float, nullable=False)

    __table_args__ = (
        Index("ix_training_trace_run_id", "run_id"),
    )


# ============================
# DTO для удобной передачи
# ============================

@dataclass(frozen=True)
class TaskOutcome:
    estimator: str
    task_index: int
    estimate: Optional[float]
    std_error: Optional[float]
    truth: float
    abs_error: Optional[float]
    status: str = "ok"
    error: Optional[str] = None
    wall_ms: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    n_tasks: int
    n_failed: int
    mae: Optional[float]
    mae_ci95: Optional[float]
    total_wall_s: float


@dataclass(frozen=True)
class SavedRun:
    id: int
    config_hash: str
    training_hash: str
    kind: str
    seed: int
    lam: float
    ncv_lam: float
    axis: str
    axis_value: Optional[float]
    artifact_version: str
    created_at: datetime
    summaries: tuple = field(default_factory=tuple)


# ============================
# Класс работы с БД
# ============================

class Database:
    """
    Обёртка над SQLAlchemy для results.db внутри папки прогона.

    - migrate(): создаёт таблицы (idempotent).
    - save_run(): пишет прогон целиком — сводку, строки по задачам и трассу обучения.
    """

    def __init__(self, database_url: str):
        """
        database_url пример:
        sqlite:///data/runs/3f9a0c1d2e_20260101T120000/results.db
        """
        self._engine = create_engine(database_url, future=True)
        self._SessionLocal = sessionmaker(bind=self._engine, autoflush=False, autocommit=False, future=True)
        logger.debug("Database initialized: %s", database_url)

    def dispose(self) -> None:
        self._engine.dispose()

    @contextmanager
    def session(self) -> Generator[Session, None, None]:
        """
        Контекстный менеджер для сессий.
        """
        session: Session = self._SessionLocal()
        try:
            yield session
            session.commit()
        except Exception as e:
            session.rollback()
            logger.exception("DB transaction rolled back due to error: %s", e)
            raise
        finally:
            session.close()

    def migrate(self) -> None:
        """
        Создаёт недостающие таблицы ORM.
        """
        Base.metadata.create_all(self._engine)
        logger.debug("Database schema migrated (tables and indexes are up-to-date)")

    def save_run(
            self,
            *,
            config_hash: str,
            training_hash: str,
            kind: str,
            seed: int,
            lam: float,
            ncv_lam: float,
            artifact_version: str,
            config_yaml: str,
            summaries: Sequence[EstimatorSummary],
            outcomes: Sequence[TaskOutcome],
            trace: Sequence[TraceRow] = (),
            axis: str = "none",
            axis_value: Optional[float] = None,
    ) -> int:
        """
        Сохраняет прогон в одной транзакции, возвращает id записи в runs
        """
        with self.session() as s:
            run = Run(
                config_hash=config_hash,
                training_hash=training_hash,
                kind=kind,
                seed=seed,
                lam=lam,
                ncv_lam=ncv_lam,
                axis=axis,
                axis_value=axis_value,
                artifact_version=artifact_version,
                config_yaml=config_yaml,
            )
            s.add(run)
            s.flush()
            s.add_all(
                EstimatorSummaryRow(run_id=run.id, **vars(summary)) for summary in summaries
            )
            s.add_all(
                TaskResultRow(run_id=run.id, **vars(outcome)) for outcome in outcomes
            )
            s.add_all(
                TrainingTraceRow(run_id=run.id, **vars(row)) for row in trace
            )
            run_id = run.id
        logger.info("Run saved: id=%s, config=%s, tasks=%s", run_id, config_hash[:10], len(outcomes))
        return run_id

    def load_runs(self) -> list[SavedRun]:
        """
        Все прогоны со сводками по оценщикам, в порядке записи
        """
        with self.session() as s:
            runs = s.execute(select(Run).order_by(Run.id.asc())).scalars().all()
            saved = []
            for run in runs:
                rows = s.execute(
                    select(EstimatorSummaryRow)
                    .where(EstimatorSummaryRow.run_id == run.id)
                    .order_by(EstimatorSummaryRow.id.asc())
                ).scalars().all()
                saved.append(SavedRun(
                    id=run.id,
                    config_hash=run.config_hash,
                    training_hash=run.training_hash,
                    kind=run.kind,
                    seed=run.seed,
                    lam=run.lam,
                    ncv_lam=run.ncv_lam,
                    axis=run.axis,
                    axis_value=run.axis_value,
                    artifact_version=run.artifact_version,
                    created_at=run.created_at,
                    summaries=tuple(
                        EstimatorSummary(
                            estimator=r.estimator,
                            n_tasks=r.n_tasks,
                            n_failed=r.n_failed,
                            mae=r.mae,
                            mae_ci95=r.mae_ci95,
                            total_wall_s=r.total_wall_s,
                        )
                        for r in rows
                    ),
                ))
            return saved

    def load_task_outcomes(self, run_id: int) -> list[TaskOutcome]:
        with self.session() as s:
            rows = s.execute(
                select(TaskResultRow)
                .where(TaskResultRow.run_id == run_id)
                .order_by(TaskResultRow.id.asc())
            ).scalars().all()
            return [
                TaskOutcome(
                    estimator=r.estimator,
                    task_index=r.task_index,
                    estimate=r.estimate,
                    std_error=r.std_error,
                    truth=r.truth,
                    abs_error=r.abs_error,
                    status=r.status,
                    error=r.error,
                    wall_ms=r.wall_ms,
                )
                for r in rows
            ]

    def load_trace(self, run_id: int) -> list[TraceRow]:
        with self.session() as s:
            rows = s.execute(
                select(TrainingTraceRow)
                .where(TrainingTraceRow.run_id == run_id)
                .order_by(TrainingTraceRow.iteration.asc())
            ).scalars().all()
            return [
                TraceRow(
                    iteration=r.iteration,
                    mean_outer_loss=r.mean_outer_loss,
                    grad_norm_estimate=r.grad_norm_estimate,
                    wall_ms=r.wall_ms,
                )
                for r in rows
            ]
