"""
Command-line front-end: `prepare`, `respond`, `bench` and `adapt`.

Every command reads an optional run config (`key = value` lines), lets flags
override it, writes its outputs into `--out` and reports success or failure
through the exit code only.
"""

import argparse
import logging
import math
from pathlib import Path
from typing import Callable, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from dfpt import bench, persistence, reports
from dfpt.adaptive import adapt_groundstate, conditioning_report
from dfpt.errors import (
    BudgetExhaustedError,
    ConvergenceError,
    DegenerateShiftError,
    InfeasibleError,
    InvalidShiftError,
)
from dfpt.gauges import GaugeKind
from dfpt.groundstate import BandPolicy, GroundState, prepare_groundstate
from dfpt.model import HamiltonianChannel, LocalPotential, load_model, load_perturbation
from dfpt.response import HartreeKernel, apply_chi0, solve_dyson
from dfpt.smearing import SmearingKind, SmearingScheme
from dfpt.sternheimer import SternheimerMethod, SternheimerOptions
from dfpt.utils.config import ConfigDict, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_GROUNDSTATE = 2
EXIT_RESPONSE = 3
EXIT_BUDGET = 4

GROUNDSTATE_FILE = "groundstate.npz"
RESPONSE_FILE = "response.npz"
REPORTS_FILE = "reports.csv"
BENCH_FILE = "bench.csv"
RATIOS_FILE = "ratios.csv"
ADAPT_TRACE_FILE = "adapt_trace.csv"

RUN_KEYS = {
    "model",
    "models",
    "smearing",
    "temperature",
    "n_el",
    "n_conv",
    "n_ex",
    "occupation_threshold",
    "eigensolver_tol",
    "eigensolver_max_iter",
    "method",
    "gauge",
    "tol",
    "max_iter",
    "precond_shift",
    "perturbation",
    "mixing",
    "dyson_tol",
    "dyson_max_iter",
    "kernel_scale",
    "xi_target",
    "max_added",
    "seed",
    "bench_pair",
    "bench_gaps",
    "bench_cell_length",
    "bench_ecut",
    "bench_methods",
}

# flag destination -> config key
FLAG_KEYS = {
    "seed": "seed",
    "method": "method",
    "gauge": "gauge",
    "tol": "tol",
    "max_iter": "max_iter",
    "precond_shift": "precond_shift",
    "perturbation": "perturbation",
    "xi_target": "xi_target",
    "max_added": "max_added",
    "methods": "bench_methods",
}

console = Console()


class _Run:
    """A run config with flag overrides applied and paths resolved."""

    def __init__(self, config: ConfigDict, base_dir: Path, out: Path):
        self.config = config
        self.base_dir = base_dir
        self.out = out

    def path(self, value: str | Path) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def seed(self) -> int:
        seed = int(self.config.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        return seed

    def smearing(self) -> SmearingScheme:
        return SmearingScheme(
            SmearingKind(self.config.get("smearing", SmearingKind.FERMI_DIRAC)),
            float(self.config.get("temperature", 1e-2)),
        )

    def band_policy(self) -> BandPolicy:
        n_conv = self.config.get("n_conv")
        return BandPolicy(
            n_conv=None if n_conv is None else int(n_conv),
            n_ex=int(self.config.get("n_ex", 3)),
            occupation_threshold=float(self.config.get("occupation_threshold", 1e-8)),
        )

    def channels(self) -> list[HamiltonianChannel]:
        if "models" in self.config:
            paths = list(self.config["models"])
        else:
            paths = [self.config.require("model")]
        if not paths:
            raise ValueError("No model files given")
        return [load_model(self.path(p)) for p in paths]

    def stern_options(self, method: str | None = None) -> SternheimerOptions:
        return SternheimerOptions(
            method=SternheimerMethod(method or self.config.get("method", "schur")),
            tol=float(self.config.get("tol", 1e-9)),
            max_iter=int(self.config.get("max_iter", 1000)),
            preconditioner_shift=float(self.config.get("precond_shift", 1.0)),
        )

    def gauge(self) -> GaugeKind:
        return GaugeKind(self.config.get("gauge", GaugeKind.MINIMAL))

    def groundstate_path(self, override: Path | None) -> Path:
        return Path(override) if override is not None else self.out / GROUNDSTATE_FILE

    def warn_unknown_keys(self):
        if unknown := [k for k in self.config.unused() if k not in RUN_KEYS]:
            logger.warning(f"Unknown config keys: {', '.join(unknown)}")


def _print_groundstate(gs: GroundState, title: str):
    table = Table(
        "channel", "weight", "N", "N_ex", "max residual", "iterations", title=title
    )
    for k, state in enumerate(gs.channels):
        spectrum = state.spectrum
        table.add_row(
            str(k),
            f"{state.channel.weight:g}",
            str(spectrum.n_occ),
            str(spectrum.n_ex),
            f"{spectrum.residual_norms.max(initial=0.0):.2e}",
            str(spectrum.iterations),
        )
    console.print(table)
    console.print(f"Fermi level: {gs.fermi_level:.12f}")


def _print_totals(rows: Sequence[reports.SolverReport], title: str):
    table = Table("method", "gauge", "gap", "iterations", "H applies", title=title)
    for r in rows:
        if r.row != reports.TOTAL_ROW:
            continue
        gap = "" if math.isnan(r.gap) else f"{r.gap:.3e}"
        table.add_row(r.method, r.gauge, gap, str(r.iterations), str(r.h_applies))
    console.print(table)


def cmd_prepare(run: _Run, args: argparse.Namespace) -> int:
    channels = run.channels()
    smearing = run.smearing()
    policy = run.band_policy()
    n_el = float(run.config.require("n_el"))
    tol = float(run.config.get("eigensolver_tol", 1e-10))
    max_iter = int(run.config.get("eigensolver_max_iter", 500))
    precond_shift = float(run.config.get("precond_shift", 1.0))
    seed = run.seed
    run.warn_unknown_keys()

    try:
        gs = prepare_groundstate(
            channels,
            smearing,
            n_el,
            policy,
            tol=tol,
            max_iter=max_iter,
            precond_shift=precond_shift,
            seed=seed,
        )
    except (InfeasibleError, ConvergenceError) as e:
        logger.error(f"Ground state failed: {e}")
        return EXIT_GROUNDSTATE

    path = run.out / GROUNDSTATE_FILE
    persistence.save_groundstate(gs, path)
    _print_groundstate(gs, title=f"Ground state ({path})")
    return EXIT_OK


def _check_compatible(gs: GroundState, dV: LocalPotential):
    if dV.max_mode > 2 * gs.basis.n_max:
        raise ValueError(
            f"Perturbation mode {dV.max_mode} does not fit the ground-state basis "
            f"(range ±{2 * gs.basis.n_max})"
        )


def cmd_respond(run: _Run, args: argparse.Namespace) -> int:
    gs = persistence.load_groundstate(run.groundstate_path(args.groundstate))
    dV = load_perturbation(run.path(run.config.require("perturbation")))
    _check_compatible(gs, dV)
    opts = run.stern_options()
    gauge = run.gauge()
    seed = run.seed
    if args.dyson:
        kernel = HartreeKernel(gs.basis, float(run.config.get("kernel_scale", 1.0)))
        mixing = float(run.config.get("mixing", 0.5))
        dyson_tol = float(run.config.get("dyson_tol", 1e-8))
        dyson_max_iter = int(run.config.get("dyson_max_iter", 100))
    run.warn_unknown_keys()

    csv_path = run.out / REPORTS_FILE
    try:
        if args.dyson:
            result = solve_dyson(
                gs, dV, kernel, mixing, dyson_tol, dyson_max_iter, opts, gauge
            )
        else:
            result = apply_chi0(gs, dV, gauge, opts)
    except (ConvergenceError, DegenerateShiftError, InvalidShiftError) as e:
        partial = list(getattr(e, "reports", []))
        reports.write_reports(partial + reports.totals(partial), csv_path)
        logger.error(f"Response failed: {e} (partial reports in {csv_path})")
        return EXIT_RESPONSE

    rows = result.reports + result.totals()
    persistence.save_response(result, run.out / RESPONSE_FILE, {"seed": seed})
    reports.write_reports(rows, csv_path)
    _print_totals(rows, title=f"Response ({csv_path})")
    console.print(f"|drho| = {result.norm():.6e}, deF = {result.deF:.6e}")
    return EXIT_OK


def cmd_bench(run: _Run, args: argparse.Namespace) -> int:
    methods = [SternheimerMethod(m) for m in run.config.get("bench_methods", [])]
    methods = methods or list(bench.DEFAULT_METHODS)
    opts = run.stern_options(method=methods[0])
    gauge = run.gauge()
    seed = run.seed

    if args.groundstate is not None:
        gs = persistence.load_groundstate(args.groundstate)
        if "perturbation" in run.config:
            dV = load_perturbation(run.path(run.config["perturbation"]))
            _check_compatible(gs, dV)
        else:
            dV = bench.broadband_perturbation(gs.basis, seed, bench.RATIO_AMPLITUDE)
        run.warn_unknown_keys()
        result, ratios = bench.bench_groundstate(
            gs, dV, methods, stern_opts=opts, gauge=gauge
        )
        reports.write_csv(ratios, run.out / RATIOS_FILE)
        _print_conditioning(gs, ratios)
    else:
        gaps = [float(g) for g in run.config.get("bench_gaps", bench.DEFAULT_GAPS)]
        pair_mode = int(run.config.get("bench_pair", 2))
        dV = None
        if "perturbation" in run.config:
            dV = load_perturbation(run.path(run.config["perturbation"]))
        sweep = dict(
            pair_mode=pair_mode,
            cell_length=float(run.config.get("bench_cell_length", 2 * math.pi)),
            ecut=float(run.config.get("bench_ecut", bench.BENCH_ECUT)),
            smearing=run.smearing(),
            eigensolver_tol=float(run.config.get("eigensolver_tol", 1e-10)),
        )
        run.warn_unknown_keys()
        result = bench.gap_sweep(
            gaps, methods, dV=dV, stern_opts=opts, gauge=gauge, seed=seed, **sweep
        )

    csv_path = run.out / BENCH_FILE
    reports.write_reports(result.reports, csv_path)
    if result.table is not None:
        result.table.finalize(raise_first=False, console=console)
    _print_totals(result.reports, title=f"Bench ({csv_path})")
    if result.failures:
        logger.error(f"{len(result.failures)} bench point(s) failed")
        return EXIT_RESPONSE
    return EXIT_OK


def _print_conditioning(gs: GroundState, ratios):
    table = Table("channel", "xi", "xi (Bauer-Fike)", "last extra residual")
    for row in conditioning_report(gs):
        table.add_row(
            str(row.channel),
            f"{row.xi:.4f}",
            f"{row.xi_bauer_fike:.4f}",
            f"{row.last_residual:.2e}",
        )
    console.print(table)
    for row in ratios.iter_rows(named=True):
        console.print(
            f"channel {row['channel']} {row['method']}: "
            f"iteration ratio {row['iteration_ratio']:.3f} (xi {row['xi']:.3f})"
        )


def cmd_adapt(run: _Run, args: argparse.Namespace) -> int:
    gs = persistence.load_groundstate(run.groundstate_path(args.groundstate))
    xi_target = float(run.config.get("xi_target", 2.2))
    max_added = int(run.config.get("max_added", 30))
    seed = run.seed if "seed" in run.config else None
    run.warn_unknown_keys()

    trace_path = run.out / ADAPT_TRACE_FILE
    try:
        adapted, trace = adapt_groundstate(gs, xi_target, max_added, seed=seed)
    except BudgetExhaustedError as e:
        if e.trace is not None:
            reports.write_csv(e.trace, trace_path)
        logger.error(f"Adaptation stopped: {e}")
        return EXIT_BUDGET
    except (InfeasibleError, ConvergenceError) as e:
        logger.error(f"Adaptation failed: {e}")
        return EXIT_GROUNDSTATE

    path = run.out / GROUNDSTATE_FILE
    persistence.save_groundstate(adapted, path)
    reports.write_csv(trace, trace_path)
    _print_groundstate(adapted, title=f"Adapted ground state ({path})")
    return EXIT_OK


def _add_shared(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="run config file")
    parser.add_argument("--seed", type=int, help="seed for every random choice")
    parser.add_argument(
        "--out", type=Path, default=Path("out"), help="output directory"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_solver_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--gauge", choices=[str(g) for g in GaugeKind])
    parser.add_argument("--tol", type=float, help="Sternheimer residual tolerance")
    parser.add_argument("--max-iter", type=int, help="Sternheimer iteration limit")
    parser.add_argument(
        "--precond-shift", type=float, help="kinetic preconditioner shift"
    )
    parser.add_argument("--perturbation", help="perturbation file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfpt",
        description="Finite-temperature density response on a plane-wave model",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    prepare = commands.add_parser("prepare", help="prepare and save a ground state")
    _add_shared(prepare)
    prepare.set_defaults(handler=cmd_prepare)

    respond = commands.add_parser(
        "respond", help="apply chi0 or solve the Dyson equation"
    )
    _add_shared(respond)
    _add_solver_flags(respond)
    respond.add_argument("--groundstate", type=Path, help="ground-state file")
    respond.add_argument("--method", choices=[str(m) for m in SternheimerMethod])
    respond.add_argument(
        "--dyson", action="store_true", help="solve the Dyson equation"
    )
    respond.set_defaults(handler=cmd_respond)

    bench_parser = commands.add_parser("bench", help="compare Sternheimer methods")
    _add_shared(bench_parser)
    _add_solver_flags(bench_parser)
    bench_parser.add_argument(
        "--groundstate", type=Path, help="bench an existing ground state instead"
    )
    bench_parser.add_argument(
        "--methods", nargs="+", choices=[str(m) for m in SternheimerMethod]
    )
    bench_parser.set_defaults(handler=cmd_bench)

    adapt = commands.add_parser(
        "adapt", help="add extra bands until xi reaches a target"
    )
    _add_shared(adapt)
    adapt.add_argument("--groundstate", type=Path, help="ground-state file")
    adapt.add_argument("--xi-target", type=float)
    adapt.add_argument("--max-added", type=int)
    adapt.set_defaults(handler=cmd_adapt)

    return parser


def _load_run(args: argparse.Namespace) -> _Run:
    if args.config is not None:
        config = load_config(args.config, defaults={})
        base_dir = args.config.parent
    else:
        config = ConfigDict()
        base_dir = Path.cwd()

    overrides = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        # Flag paths are relative to the working directory, not the config
        overrides[key] = str(Path(value).resolve()) if key == "perturbation" else value
    config.nested_update(overrides, touch=False)
    return _Run(config, base_dir, args.out)


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True))],
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)

    handler: Callable[[_Run, argparse.Namespace], int] = args.handler
    try:
        run = _load_run(args)
        return handler(run, args)
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
