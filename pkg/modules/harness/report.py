from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

from config import RESULTS_DB_NAME
from modules.database.database import Database

logger = logging.getLogger("harness.report")

REPORT_COLUMNS = ["axis_value", "estimator", "mae", "ci95"]

"""
Сводка по одной или нескольким папкам прогонов/свипов: по CSV на каждую ось
(данные для графиков MAE ± CI) и текстовая таблица в stdout.
"""


def _result_files(paths: Sequence[Union[str, Path]]) -> List[Path]:
    found = []
    for path in paths:
        path = Path(path)
        if path.is_file():
            found.append(path)
        elif path.is_dir():
            found.extend(sorted(path.rglob(RESULTS_DB_NAME)))
        else:
            raise FileNotFoundError(f"No such result file or directory: {path}")
    return found


def collect_summaries(paths: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """
    Строки (config_hash, estimator, axis, axis_value, mae, ci95) из всех results.db.
    Повторы по (config_hash, estimator) отбрасываются, первый побеждает.
    """
    files = _result_files(paths)
    if not files:
        raise ValueError(f"no {RESULTS_DB_NAME} found under {', '.join(str(p) for p in paths)}")
    rows = []
    for file in files:
        database = Database(f"sqlite:///{file.resolve()}")
        try:
            runs = database.load_runs()
        except SQLAlchemyError as e:
            raise ValueError(f"Malformed result file {file}: {e}") from e
        finally:
            database.dispose()
        for run in runs:
            for s in run.summaries:
                rows.append({
                    "config_hash": run.config_hash,
                    "estimator": s.estimator,
                    "axis": run.axis,
                    "axis_value": run.axis_value,
                    "mae": s.mae,
                    "ci95": s.mae_ci95,
                    "n_failed": s.n_failed,
                    "source": str(file),
                })
    frame = pd.DataFrame(rows)
    if frame.empty:
        raise ValueError("result files contain no estimator rows")
    return frame.drop_duplicates(subset=["config_hash", "estimator"], keep="first").reset_index(drop=True)


def report(
        paths: Sequence[Union[str, Path]],
        out_dir: Optional[Union[str, Path]] = None,
        echo: bool = True,
) -> Dict[str, pd.DataFrame]:
    frame = collect_summaries(paths)
    out_dir = Path(out_dir) if out_dir else Path(paths[0]) if Path(paths[0]).is_dir() else Path(paths[0]).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    tables = {}
    for axis, group in frame.groupby("axis", sort=True):
        table = (
            group.sort_values(["axis_value", "estimator"], kind="stable", na_position="first")
            [REPORT_COLUMNS]
            .reset_index(drop=True)
        )
        path = out_dir / f"report_{axis}.csv"
        table.to_csv(path, index=False, float_format="%.12e")
        logger.info("Report for axis %s written to %s", axis, path)
        tables[axis] = table
        if echo:
            print(f"\naxis: {axis}")
            print(table.to_string(index=False, float_format=lambda v: f"{v:.4e}"))
    return tables
