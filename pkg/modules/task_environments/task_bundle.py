from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, List, Union

from modules.metacv.estimators import TaskDataset

from .records import GroundTruth, TaskRecord

logger = logging.getLogger("tasks")

BUNDLE_SCHEMA_VERSION = 1

"""
Формат бандла задач: одна JSON-запись на строку.
{
  "schema_version": 1, "kind": "oscillatory" | "ode", "index": int, "seed": int, "namespace": "train" | "test",
  "params": [a...], "n": N, "support_size": m,
  "points": [[...], ...], "scores": [[...], ...], "values": [...],
  "truth": {"value": float, "method": str, "resolution": int | null, "error_estimate": float | null}
}
Числа пишутся через repr float, так что чтение восстанавливает их бит-в-бит.
"""


def _to_json(record: TaskRecord) -> dict:
    data = record.dataset
    return {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "kind": record.kind,
        "index": record.index,
        "seed": record.seed,
        "namespace": record.namespace,
        "params": list(record.params),
        "n": data.size,
        "support_size": data.support_size,
        "points": data.points.tolist(),
        "scores": data.scores.tolist(),
        "values": data.values.tolist(),
        "truth": {
            "value": record.truth.value,
            "method": record.truth.method,
            "resolution": record.truth.resolution,
            "error_estimate": record.truth.error_estimate,
        },
    }


def write_task_bundle(path: Union[str, Path], records: Iterable[TaskRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as file:
        for record in records:
            file.write(json.dumps(_to_json(record)) + "\n")
            count += 1
    logger.info("Wrote %d task records to %s", count, path)
    return path


def read_task_bundle(path: Union[str, Path]) -> List[TaskRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if raw["schema_version"] != BUNDLE_SCHEMA_VERSION:
                    raise ValueError(f"unsupported schema version {raw['schema_version']}")
                dataset = TaskDataset.from_arrays(raw["points"], raw["scores"], raw["values"], raw["support_size"])
                if dataset.size != raw["n"]:
                    raise ValueError(f"record declares n = {raw['n']} but holds {dataset.size} points")
                records.append(TaskRecord(
                    kind=raw["kind"],
                    index=int(raw["index"]),
                    seed=int(raw["seed"]),
                    namespace=raw["namespace"],
                    params=tuple(float(v) for v in raw["params"]),
                    dataset=dataset,
                    truth=GroundTruth(**raw["truth"]),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"Malformed task record at {path}:{line_number}: {e}") from e
    return records
