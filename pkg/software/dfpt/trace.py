from typing import Iterable, Self

import polars as pl


class Trace:
    """An iteration-indexed series of values (e.g. a residual history)."""

    ITERATION_COLUMN = "iteration"

    def __init__(self, name: str, data: pl.DataFrame | None = None):
        self._name = name
        self._pending: list[float] = []
        self._frame = data if data is not None else self._empty_frame()

    def _empty_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            schema={self.ITERATION_COLUMN: pl.Int64, self._name: pl.Float64}
        )

    @classmethod
    def from_history(cls, name: str, history: Iterable[float]) -> Self:
        trace = cls(name)
        trace.extend(history)
        return trace

    def __len__(self) -> int:
        return self._frame.height + len(self._pending)

    def append(self, value: float) -> None:
        self._pending.append(float(value))

    def extend(self, values: Iterable[float]) -> None:
        self._pending.extend(map(float, values))

    def to_polars(self) -> pl.DataFrame:
        # Values appended since the last call are numbered after the stored rows
        if self._pending:
            start = self._frame.height
            stop = start + len(self._pending)
            tail = pl.DataFrame(
                {
                    self.ITERATION_COLUMN: list(range(start, stop)),
                    self._name: self._pending,
                },
                schema=self._frame.schema,
            )
            self._frame = pl.concat([self._frame, tail])
            self._pending = []
        return self._frame

    @property
    def name(self) -> str:
        return self._name

    @property
    def value(self) -> pl.Expr:
        return pl.col(self._name)

    @property
    def iteration(self) -> pl.Expr:
        return pl.col(self.ITERATION_COLUMN)

    def derive(self, data: pl.DataFrame) -> Self:
        return type(self)(self._name, data)

    def get_last(self, count: int) -> Self:
        """The last `count` iterations."""
        return self.derive(self.to_polars().sort(self.ITERATION_COLUMN).tail(count))

    @property
    def iterations(self) -> pl.Series:
        return self.to_polars()[self.ITERATION_COLUMN]

    @property
    def data(self) -> pl.Series:
        return self.to_polars()[self._name]

    @property
    def final(self) -> float:
        return float(self.data[-1])

    def reduction(self) -> float:
        """Ratio of the last to the first value, 0 when the first is 0."""
        first, last = float(self.data[0]), self.final
        return last / first if first else 0.0

    def is_decreasing(self, slack: float = 0.0) -> bool:
        steps = self.data.diff().drop_nulls()
        return bool((steps <= slack).all())
