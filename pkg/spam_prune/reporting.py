"""
Prune reports and sweep summaries.

A PruneReport holds one row per (seed, mode, criterion, sparsity) cell and is
written as CSV with the frozen column order of ``REPORT_COLUMNS`` plus a JSON
copy. Sweeps aggregate rows into mean and standard error per cell; cells with
no rows are written with explicit nulls.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .const import REPORT_COLUMNS, SWEEP_COLUMNS
from .errors import FormatError, StructuralError

_LOGGER = logging.getLogger(__name__)

NULL = "null"
SWEEP_METRICS = [
    "accuracy",
    "nll",
    "ece",
    "brier",
    "realized_sparsity",
    "params_total",
    "flops_per_forward",
    "bytes_on_disk",
    "wall_time",
]


class ReportRow(BaseModel):
    """Evaluation and cost of one pruned network."""

    seed: int
    mode: str
    criterion: str
    sparsity: float
    realized_sparsity: float
    accuracy: Optional[float] = None
    nll: float
    ece: Optional[float] = None
    brier: Optional[float] = None
    n: int
    params_total: int
    flops_per_forward: int
    bytes_on_disk: int
    wall_time: float = 0.0

    @property
    def key(self) -> Tuple[int, str, str, float]:
        return self.seed, self.mode, self.criterion, self.sparsity


class SweepRow(BaseModel):
    mode: str
    criterion: str
    sparsity: float
    metric: str
    mean: Optional[float] = None
    stderr: Optional[float] = None
    count: int = 0


def _cell(value) -> str:
    if value is None:
        return NULL
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")


class PruneReport:
    """Append-only collection of report rows."""

    def __init__(self, rows: Optional[Iterable[ReportRow]] = None):
        self.rows: List[ReportRow] = []
        self._keys: set = set()
        for row in rows or []:
            self.append(row)

    def append(self, row: ReportRow) -> None:
        if row.key in self._keys:
            raise StructuralError(f"Duplicate report row for cell {row.key}")
        self._keys.add(row.key)
        self.rows.append(row)

    def extend(self, rows: Iterable[ReportRow]) -> None:
        for row in rows:
            self.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: Path | str) -> Path:
        path = Path(path)
        _write_csv(path, REPORT_COLUMNS, (r.model_dump() for r in self.rows))
        _LOGGER.info("Wrote %d report rows to %s", len(self.rows), path)
        return path

    def write_json(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"columns": REPORT_COLUMNS, "rows": [r.model_dump() for r in self.rows]}
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    @classmethod
    def read_csv(cls, path: Path | str) -> "PruneReport":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames != REPORT_COLUMNS:
                raise FormatError(f"{path.name}: unexpected report columns", line=1)
            rows = []
            for raw in reader:
                values = {k: (None if v == NULL else v) for k, v in raw.items()}
                try:
                    rows.append(ReportRow(**values))
                except ValueError as err:
                    raise FormatError(f"{path.name}: {err}", line=reader.line_num) from err
        return cls(rows)


def _stats(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, None
    return mean, float(arr.std(ddof=1) / math.sqrt(arr.size))


def aggregate(
    rows: Sequence[ReportRow],
    modes: Sequence[str],
    criteria: Sequence[str],
    sparsities: Sequence[float],
    metrics: Sequence[str] = SWEEP_METRICS,
) -> List[SweepRow]:
    """Mean and standard error over seeds for every grid cell and metric."""
    cells: Dict[Tuple[str, str, float], List[ReportRow]] = {}
    for row in rows:
        cells.setdefault((row.mode, row.criterion, row.sparsity), []).append(row)
    out = []
    for mode in modes:
        for criterion in criteria:
            for sparsity in sparsities:
                members = cells.get((mode, criterion, sparsity), [])
                if not members:
                    _LOGGER.warning(
                        "No rows for %s/%s at sparsity %s", mode, criterion, sparsity
                    )
                for metric in metrics:
                    values = [
                        float(getattr(r, metric))
                        for r in members
                        if getattr(r, metric) is not None
                    ]
                    mean, stderr = _stats(values)
                    out.append(
                        SweepRow(
                            mode=mode,
                            criterion=criterion,
                            sparsity=sparsity,
                            metric=metric,
                            mean=mean,
                            stderr=stderr,
                            count=len(values),
                        )
                    )
    return out


def write_sweep_csv(path: Path | str, rows: Sequence[SweepRow]) -> Path:
    path = Path(path)
    _write_csv(path, SWEEP_COLUMNS, (r.model_dump() for r in rows))
    _LOGGER.info("Wrote sweep summary with %d rows to %s", len(rows), path)
    return path
