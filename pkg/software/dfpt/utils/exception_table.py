import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, ContextManager, Generator, Iterable, Sequence

from rich.console import Console
from rich.table import Table
from rich.text import Text

logger = logging.getLogger(__name__)

MAX_CELL_WIDTH = 12


@dataclass
class _Cell:
    """What a column shows once its block exits without raising."""

    value: Any = "Pass"


@dataclass
class _Row:
    name: str
    cells: list[Any] = field(default_factory=list)

    @property
    def failures(self) -> list[Exception]:
        return [c for c in self.cells if isinstance(c, Exception)]


def _render(obj: Any) -> Text:
    if isinstance(obj, Exception):
        return Text(type(obj).__name__, style="red")
    if isinstance(obj, float):
        text = f"{obj:.4g}"
    else:
        text = str(obj)
    if len(text) > MAX_CELL_WIDTH:
        text = text[: MAX_CELL_WIDTH - 1] + "."
    return Text(text, style="green")


class ExceptionTable:
    """
    Outcome grid for a sweep: one row per point (a gap, a ground state), one
    column per variant (a Sternheimer method). A failing cell is kept and the
    sweep moves on; `finalize` prints the grid and surfaces the failures.
    """

    def __init__(self, headers: Sequence[str] | None = None):
        if headers is None:
            raise ValueError("ExceptionTable needs column headers")
        self.headers = list(headers)
        self._rows: list[_Row] = []
        self._finalized = False

    @property
    def finalized(self) -> bool:
        return self._finalized

    @property
    def exceptions(self) -> list[Exception]:
        return [e for row in self._rows for e in row.failures]

    @property
    def table(self) -> Table:
        table = Table("", *self.headers)
        for row in self._rows:
            table.add_row(row.name, *[_render(c) for c in row.cells])
        return table

    def add_row(self, name: str, *cells: Any):
        if self._finalized:
            raise RuntimeError("ExceptionTable is finalized, no rows can be added")
        self._rows.append(_Row(name, list(cells)))

    def iter_row[T](
        self, name: str, columns: Iterable[T]
    ) -> Generator[tuple[ContextManager[_Cell], T], None, None]:
        """
        Yield `(context, column)` pairs. An exception raised inside `context`
        fills that cell; otherwise the cell shows whatever was put in
        `cell.value`. The row is added when iteration ends.
        """
        cells: list[Any] = []

        @contextmanager
        def _capture() -> Generator[_Cell, None, None]:
            cell = _Cell()
            try:
                yield cell
            except Exception as e:
                logger.warning(f"{name}: {type(e).__name__}: {e}")
                cells.append(e)
            else:
                cells.append(cell.value)

        try:
            for column in columns:
                yield _capture(), column
        finally:
            if (missing := len(self.headers) - len(cells)) > 0:
                logger.warning("Missing %d column/s for row %s", missing, name)
            self.add_row(name, *cells)

    def exception_group(self) -> ExceptionGroup | None:
        if exceptions := self.exceptions:
            return ExceptionGroup("Sweep point failures", exceptions)
        return None

    def print_table(self, console: Console | None = None):
        (console or Console(color_system="256")).print("\n", self.table)

    def finalize(self, raise_first: bool = True, console: Console | None = None):
        """Print the grid and, with `raise_first`, re-raise the first failure."""
        if self._finalized:
            raise RuntimeError("ExceptionTable is already finalized")
        self._finalized = True
        self.print_table(console)

        failed = [row.name for row in self._rows if row.failures]
        if failed:
            logger.warning(f"Failures in {len(failed)} row(s): {', '.join(failed)}")
            if raise_first:
                raise self.exceptions[0]

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.finalize()
