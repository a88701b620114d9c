"""
Per-solve reports and their CSV form.

Rows are either `solve` rows (one per channel, band and method) or `total`
rows (one per method). Floats are written with 17 significant digits so a
table survives a write/read cycle unchanged.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import polars as pl

logger = logging.getLogger(__name__)

SOLVE_ROW = "solve"
TOTAL_ROW = "total"


@dataclass(frozen=True)
class SolverReport:
    channel: int
    band: int
    method: str
    gauge: str
    gap: float
    iterations: int
    final_residual: float
    h_applies: int
    row: str = SOLVE_ROW


SCHEMA = pl.Schema(
    {
        "row": pl.String,
        "channel": pl.Int64,
        "band": pl.Int64,
        "method": pl.String,
        "gauge": pl.String,
        "gap": pl.Float64,
        "iterations": pl.Int64,
        "final_residual": pl.Float64,
        "h_applies": pl.Int64,
    }
)


def totals(
    reports: Sequence[SolverReport], extra_applies: dict[str, int] | None = None
) -> list[SolverReport]:
    """One `total` row per method; `extra_applies` adds per-method setup cost."""
    extra_applies = extra_applies or {}
    rows = []
    methods = list(dict.fromkeys(r.method for r in reports if r.row == SOLVE_ROW))
    for method in methods:
        solves = [r for r in reports if r.method == method and r.row == SOLVE_ROW]
        rows.append(
            SolverReport(
                channel=-1,
                band=-1,
                method=method,
                gauge=solves[0].gauge,
                gap=math.nan,
                iterations=sum(r.iterations for r in solves),
                final_residual=max(r.final_residual for r in solves),
                h_applies=sum(r.h_applies for r in solves)
                + extra_applies.get(method, 0),
                row=TOTAL_ROW,
            )
        )
    return rows


def to_frame(reports: Iterable[SolverReport]) -> pl.DataFrame:
    records = [asdict(r) for r in reports]
    columns = {name: [rec[name] for rec in records] for name in SCHEMA.names()}
    return pl.DataFrame(columns, schema=SCHEMA)


def from_frame(frame: pl.DataFrame) -> list[SolverReport]:
    names = {f.name for f in fields(SolverReport)}
    return [
        SolverReport(**{k: v for k, v in row.items() if k in names})
        for row in frame.iter_rows(named=True)
    ]


def _format_float(value: float | None) -> str:
    if value is None or math.isnan(value):
        return "nan"
    return f"{value:.17g}"


def write_csv(frame: pl.DataFrame, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text_frame = frame.with_columns(
        pl.Series(
            name, [_format_float(v) for v in frame[name].to_list()], dtype=pl.String
        )
        for name in frame.columns
        if frame.schema[name] == pl.Float64
    )
    text_frame.write_csv(path, separator=",")
    logger.debug(f"Wrote {frame.height} rows to {path}")


def read_csv(path: Path, schema: pl.Schema | None = None) -> pl.DataFrame:
    """Read a table written by `write_csv`; float columns are parsed exactly."""
    schema = schema or SCHEMA
    text_schema = {
        name: (pl.String if dtype == pl.Float64 else dtype)
        for name, dtype in schema.items()
    }
    frame = pl.read_csv(path, schema=text_schema)
    return frame.with_columns(
        pl.col(name).cast(pl.Float64)
        for name, dtype in schema.items()
        if dtype == pl.Float64
    )


def write_reports(reports: Sequence[SolverReport], path: Path):
    write_csv(to_frame(reports), path)


def read_reports(path: Path) -> list[SolverReport]:
    return from_frame(read_csv(path))
