"""Append-only CSV reports with a fixed header.

Rows carry only deterministic quantities; wall-clock seconds per row go to a
``.timings.json`` sidecar so reruns reproduce the CSV byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

from genq.errors import FormatError

HEADER = ("experiment_id", "seed", "stage", "metric", "value", "delta")


@dataclass(frozen=True)
class ReportRow:
    experiment_id: str
    seed: int
    stage: str
    metric: str
    value: float
    delta: float | None = None
    seconds: float = 0.0

    def cells(self) -> list[str]:
        return [self.experiment_id, str(self.seed), self.stage, self.metric,
                repr(float(self.value)), "" if self.delta is None else repr(float(self.delta))]


class Report:
    def __init__(self, experiment_id: str):
        self.experiment_id = experiment_id
        self.rows: list[ReportRow] = []
        self._mark = time.perf_counter()

    def add(self, seed: int, stage: str, metric: str, value: float,
            delta: float | None = None) -> ReportRow:
        now = time.perf_counter()
        row = ReportRow(self.experiment_id, seed, stage, metric, float(value), delta,
                        round(now - self._mark, 3))
        self._mark = now
        self.rows.append(row)
        return row

    def values(self, stage: str | None = None, metric: str | None = None) -> list[float]:
        return [r.value for r in self.rows
                if (stage is None or r.stage == stage) and (metric is None or r.metric == metric)]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def write(self, path) -> None:
        """Write atomically: a temp file renamed over the target."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.csv_text())
        os.replace(tmp, path)
        timings = [{"stage": r.stage, "metric": r.metric, "seed": r.seed, "seconds": r.seconds}
                   for r in self.rows]
        path.with_suffix(".timings.json").write_text(json.dumps(timings, indent=1) + "\n")


def parse_report(text: str) -> list[ReportRow]:
    """Read a report back, rejecting anything that breaks the schema."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("report is empty") from None
    if tuple(header) != HEADER:
        raise FormatError(f"report header {header} != {list(HEADER)}")
    rows = []
    for lineno, cells in enumerate(reader, start=2):
        if len(cells) != len(HEADER):
            raise FormatError(f"line {lineno}: expected {len(HEADER)} fields, got {len(cells)}")
        exp, seed, stage, metric, value, delta = cells
        try:
            seed_i = int(seed)
            value_f = float(value)
            delta_f = float(delta) if delta else None
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        if not exp or not stage or not metric:
            raise FormatError(f"line {lineno}: empty identifier field")
        if not math.isfinite(value_f) or (delta_f is not None and not math.isfinite(delta_f)):
            raise FormatError(f"line {lineno}: non-finite number")
        rows.append(ReportRow(exp, seed_i, stage, metric, value_f, delta_f))
    if not rows:
        raise FormatError("report has no rows")
    return rows


def read_report(path) -> list[ReportRow]:
    return parse_report(Path(path).read_text())
