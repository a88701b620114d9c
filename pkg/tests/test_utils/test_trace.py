import polars as pl
import pytest

from dfpt.pytest_plugin import chart_path_for, traces_frame
from dfpt.trace import Trace


def test_trace_from_history():
    trace = Trace.from_history("band0", [1.0, 0.1, 0.01])
    assert len(trace) == 3
    assert trace.iterations.to_list() == [0, 1, 2]
    assert trace.final == pytest.approx(0.01)
    assert trace.reduction() == pytest.approx(0.01)
    assert trace.is_decreasing()


def test_trace_appends_after_materialising():
    trace = Trace("residual")
    trace.append(4.0)
    trace.to_polars()
    trace.extend([2.0, 3.0])
    assert trace.iterations.to_list() == [0, 1, 2]
    assert not trace.is_decreasing()
    assert trace.is_decreasing(slack=1.0)
    assert trace.get_last(2).data.to_list() == [2.0, 3.0]


def test_empty_trace_reduction():
    assert Trace.from_history("zero", [0.0, 0.0]).reduction() == 0.0


def test_traces_frame_long_format():
    frame = traces_frame(
        [
            Trace.from_history("a", [1.0, 0.5]),
            Trace("empty"),
            Trace.from_history("b", [2.0]),
        ]
    )
    assert frame.columns == ["iteration", "trace", "value"]
    assert frame["trace"].to_list() == ["a", "a", "b"]
    assert traces_frame([]).schema == pl.Schema(
        {"iteration": pl.Int64, "trace": pl.String, "value": pl.Float64}
    )


def test_chart_path_is_sanitised():
    path = chart_path_for("tests/test_physics/test_response.py::test_dyson[0.5]")
    assert path.suffix == ".html"
    assert "/" not in path.name and ":" not in path.name


def test_record_fixture(record):
    trace = record("residual", [1.0, 1e-3, 1e-9])
    assert isinstance(trace, Trace)
    assert record(Trace.from_history("other", [1.0])).name == "other"
    with pytest.raises(ValueError):
        record(Trace("bad"), [1.0])
