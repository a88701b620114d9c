"""
Pytest plugin providing a 'record' fixture that collects solver convergence
traces in tests and renders them as an interactive Altair chart attached to
the pytest-html report.

Example:
----------------------------------------------------------------
def test_example(record):
    result = apply_chi0(gs, dV)
    for trace in result.traces():
        record(trace)
    record("dyson", dyson.history)
----------------------------------------------------------------
"""

import logging
from pathlib import Path
from typing import Iterable, Protocol

import altair as alt
import pathvalidate
import polars as pl
import pytest
from pytest_html import extras as html_extras

from dfpt.trace import Trace

logger = logging.getLogger(__name__)


REPO_ROOT = Path(__file__).parent.parent.parent
ARTIFACTS = REPO_ROOT / "artifacts"
CHART_HEIGHT = 400


class _Config(Protocol):
    _dfpt_recorded_trace_paths: dict[str, Path]


class _Node(Protocol):
    nodeid: str


class _Request(Protocol):
    config: _Config
    node: _Node


class _Item(Protocol):
    config: _Config
    nodeid: str


def pytest_configure(config: _Config):
    """Initialise the map of test node ids to chart paths."""
    config._dfpt_recorded_trace_paths = {}  # {node_id: Path}


def chart_path_for(nodeid: str) -> Path:
    sanitized_nodeid = (
        pathvalidate.sanitize_filename(nodeid)
        .replace(":", "-")
        .replace("/", "-")
        .replace(".", "-")
    )
    return ARTIFACTS / f"{sanitized_nodeid}.html"


def traces_frame(traces: Iterable[Trace]) -> pl.DataFrame:
    """Long format (iteration, trace, value) of all non-empty traces."""
    frames = [
        trace.to_polars().select(
            trace.iteration,
            pl.lit(trace.name).alias("trace"),
            trace.value.alias("value"),
        )
        for trace in traces
        if len(trace)
    ]
    if not frames:
        return pl.DataFrame(
            schema={"iteration": pl.Int64, "trace": pl.String, "value": pl.Float64}
        )
    return pl.concat(frames)


def _save_request_traces(request: _Request, traces: list[Trace]) -> None:
    combined = traces_frame(traces)
    if combined.is_empty():
        logger.debug(f"No data found for {request.node.nodeid}")
        return

    # Residuals of zero cannot be drawn on a log axis
    combined = combined.filter(pl.col("value") > 0)

    chart = (
        alt.Chart(combined)
        .mark_line(point=True)
        .encode(
            x=alt.X("iteration:Q", title="Iteration"),
            y=alt.Y("value:Q", title="Residual", scale=alt.Scale(type="log")),
            color="trace:N",
            tooltip=[
                alt.Tooltip("iteration:Q", title="Iteration"),
                alt.Tooltip("trace:N", title="Trace"),
                alt.Tooltip("value:Q", title="Value", format=".3e"),
            ],
        )
        .properties(width="container", height=CHART_HEIGHT)
        .interactive()
    )

    chart_path = request.config._dfpt_recorded_trace_paths[request.node.nodeid]
    chart_path.parent.mkdir(parents=True, exist_ok=True)
    chart.save(chart_path)


@pytest.fixture(scope="function")
def record(request: _Request):
    """
    A callable taking either a Trace or a name and a sequence of values.
    Recorded traces are charted once the test finishes.
    """
    traces: list[Trace] = []

    def _record(trace: Trace | str, values: Iterable[float] | None = None) -> Trace:
        if isinstance(trace, str):
            trace = Trace.from_history(trace, values or [])
        elif values is not None:
            raise ValueError("values are only accepted together with a trace name")
        traces.append(trace)

        # Registered here because the report is built before fixture teardown
        request.config._dfpt_recorded_trace_paths[request.node.nodeid] = (
            chart_path_for(request.node.nodeid)
        )
        return trace

    try:
        yield _record
    finally:
        logger.debug(f"Saving {len(traces)} traces for {request.node.nodeid}")
        _save_request_traces(request, traces)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: _Item, call: pytest.CallInfo):
    outcome = yield
    report = outcome.get_result()
    report.extras = getattr(report, "extras", [])

    if call.when == "call" and (
        trace_chart_path := item.config._dfpt_recorded_trace_paths.get(item.nodeid)
    ):
        report.extras.append(
            html_extras.url(f"./{trace_chart_path.name}", name="Traces")
        )
        report.extras.append(
            html_extras.html(
                f"<iframe style='width: 100%; height: {CHART_HEIGHT + 150}px; "
                f"border: none;' src='./{trace_chart_path.name}'></iframe>"
            )
        )
