"""Command-line entry point: ``solve-path``, ``certify``, ``region-slice`` and ``pf``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tabulate

from app.config import load_run_settings, settings
from app.grid.case_io import Network, load_case
from app.grid.conic import to_cbf
from app.grid.errors import ConfigurationError, FeasPathError, PowerFlowDivergedError
from app.grid.matrices import build_admittances
from app.grid.powerflow import evaluate_setpoint, generation_cost
from app.grid.region import classify_grid, restriction_at
from app.grid.restriction import objective_cost
from app.grid.sequential import FeasiblePath, certify_path, optimality_gap, run
from app.grid.start import uniform_cost_start
from app.schemas.path import read_dispatch, read_path, region_document, write_document, write_path

logger = logging.getLogger("feaspath")

EX_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _pair(raw: str, what: str) -> tuple[float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise UsageError(f"{what} needs two comma-separated numbers, got {raw!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise UsageError(f"{what} needs two comma-separated numbers, got {raw!r}") from None
    if lo > hi:
        raise UsageError(f"{what} is empty: {lo} > {hi}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="Logging level (default from LOG_LEVEL).")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON settings file merged under command-line flags.")

    ap = _Parser(prog="feaspath", description="Feasible-path AC OPF by sequential convex restriction.", parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve-path", parents=[common], help="Run the sequential restriction from a start dispatch.")
    sp.add_argument("case", help="MATPOWER case file.")
    sp.add_argument("--objective", choices=("cost", "distance"), default=None)
    sp.add_argument("--start", default=None, help="Start dispatch JSON (default: dispatch stored in the case).")
    sp.add_argument(
        "--uniform-start",
        action="store_true",
        help="Start from the uniform-linear-cost optimum, reached from --start or the DC dispatch.",
    )
    sp.add_argument("--target", default=None, help="Target dispatch JSON (distance mode).")
    sp.add_argument("--lambda", dest="lam", type=float, default=None, help="Weight of reactive/power components in distance mode.")
    sp.add_argument("--epsilon", type=float, default=None, help="Step-norm stopping threshold.")
    sp.add_argument("--max-iter", dest="max_iterations", type=int, default=None)
    sp.add_argument("--certify", action="store_true", help="Sample every segment and fail on any violation.")
    sp.add_argument("--reference-cost", type=float, default=None, help="Reference optimum for the gap columns.")
    sp.add_argument("--dump-cbf", default=None, help="Write the first restriction program in CBF form.")
    sp.add_argument("--out", default=None, help="Path document output (JSON).")
    sp.add_argument("--workers", type=int, default=None, help="Threads for certification samples.")

    cp = sub.add_parser("certify", parents=[common], help="Certify a stored path document.")
    cp.add_argument("case")
    cp.add_argument("path", help="Path document produced by solve-path.")
    cp.add_argument("--samples", type=int, default=None, help="Samples per segment, endpoints included.")
    cp.add_argument("--workers", type=int, default=None, help="Threads for certification samples.")

    rp = sub.add_parser("region-slice", parents=[common], help="Classify a grid over two control axes.")
    rp.add_argument("case")
    rp.add_argument("--axes", required=True, help="Two controls, e.g. pg:2,qg:2.")
    rp.add_argument("--grid", type=int, default=21)
    rp.add_argument("--x-range", default=None, help="lo,hi of the first axis (default: its limits).")
    rp.add_argument("--y-range", default=None, help="lo,hi of the second axis (default: its limits).")
    rp.add_argument("--base", default=None, help="Base dispatch JSON (default: dispatch stored in the case).")
    rp.add_argument("--out", default=None, help="Slice document output (JSON).")
    rp.add_argument("--workers", type=int, default=None, help="Threads for grid rows.")

    pp = sub.add_parser("pf", parents=[common], help="Solve the power flow at one dispatch.")
    pp.add_argument("case")
    pp.add_argument("--dispatch", default=None, help="Dispatch JSON (default: dispatch stored in the case).")
    return ap


def _setup_logging(level: Optional[str]) -> None:
    name = (level or settings.LOG_LEVEL or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise UsageError(f"unknown log level {level!r}")
    logging.basicConfig(level=name, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        logger.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _dispatch_or_file(path: Optional[str], net: Network) -> np.ndarray:
    return read_dispatch(path, net) if path else net.file_dispatch()


def _dispatch_rows(net: Network, u: np.ndarray) -> list[tuple[str, float]]:
    return list(zip(net.control_names(), u.tolist()))


def _summary(net: Network, path: FeasiblePath, reference: Optional[float]) -> str:
    first = path.costs[1] if path.iterations else path.costs[0]
    headers = ["case", "initial", "first iteration", "final", "iterations", "solver time [s]"]
    row = [net.name, path.initial_cost, first, path.final_cost, path.iterations, sum(path.solver_times)]
    if reference is not None:
        headers[4:4] = ["gap first", "gap final"]
        row[4:4] = [optimality_gap(first, reference), optimality_gap(path.final_cost, reference)]
    return tabulate.tabulate([row], headers=headers, floatfmt=".6g")


def cmd_solve_path(args: argparse.Namespace) -> int:
    cfg = load_run_settings(
        getattr(args, "config", None),
        {
            "objective": args.objective,
            "lam": args.lam,
            "epsilon": args.epsilon,
            "max_iterations": args.max_iterations,
            "workers": args.workers,
        },
    )
    if cfg.objective == "distance" and not args.target:
        raise UsageError("distance objective needs --target")
    net = load_case(args.case)
    if args.uniform_start:
        start = uniform_cost_start(net, read_dispatch(args.start, net) if args.start else None, cfg)
    else:
        start = _dispatch_or_file(args.start, net)
    target = read_dispatch(args.target, net) if args.target else None

    if args.dump_cbf:
        prob = restriction_at(net, start, cfg.pf_tol, cfg.pf_max_iter)
        prob.program.set_objective(objective_cost(prob))
        Path(args.dump_cbf).write_text(to_cbf(prob.program, cfg.solver.coefficient_cleanup), encoding="utf-8")
        logger.info("wrote first restriction to %s", args.dump_cbf)

    try:
        path = run(net, start, cfg, target)
    except FeasPathError as exc:
        if exc.path is not None and args.out:
            _emit(write_path(exc.path, net, cfg.objective, cfg.lam, cfg.epsilon), args.out)
        raise
    if args.certify:
        certify_path(path, net, cfg.samples_per_segment, cfg.feasibility_tol, cfg.pf_tol, cfg.pf_max_iter, cfg.workers)
    if args.out:
        _emit(write_path(path, net, cfg.objective, cfg.lam, cfg.epsilon), args.out)
    print(_summary(net, path, args.reference_cost))
    if path.certificate is not None:
        path.certificate.raise_for_failure()
    return 0


def cmd_certify(args: argparse.Namespace) -> int:
    cfg = load_run_settings(getattr(args, "config", None), {"samples_per_segment": args.samples, "workers": args.workers})
    net = load_case(args.case)
    try:
        doc = read_path(Path(args.path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read path document {args.path}: {exc}") from exc
    if doc.control_names != net.control_names():
        raise ConfigurationError(f"path document controls do not match case {net.name}")
    report = certify_path(doc.setpoints(), net, cfg.samples_per_segment, cfg.feasibility_tol, cfg.pf_tol, cfg.pf_max_iter, cfg.workers)
    rows = sorted(report.worst.items())
    print(tabulate.tabulate(rows, headers=["constraint", "worst margin"], floatfmt=".3e"))
    print(f"segments={report.segments} samples={report.samples} failures={len(report.failures)}")
    report.raise_for_failure()
    return 0


def cmd_region_slice(args: argparse.Namespace) -> int:
    if args.grid <= 0:
        raise UsageError("--grid must be positive")
    axes = tuple(a.strip() for a in args.axes.split(","))
    if len(axes) != 2:
        raise UsageError(f"--axes needs two controls, got {args.axes!r}")
    cfg = load_run_settings(getattr(args, "config", None), {"workers": args.workers})
    net = load_case(args.case)
    ix, iy = net.control_index(axes[0]), net.control_index(axes[1])
    if ix == iy:
        raise UsageError("--axes must name two different controls")
    lo, hi = net.control_bounds()
    x_range = _pair(args.x_range, "--x-range") if args.x_range else (lo[ix], hi[ix])
    y_range = _pair(args.y_range, "--y-range") if args.y_range else (lo[iy], hi[iy])
    base = _dispatch_or_file(args.base, net)
    region = classify_grid(net, base, axes, x_range, y_range, args.grid, cfg.solver, cfg.feasibility_tol, cfg.workers)
    _emit(write_document(region_document(region, net)), args.out)
    return 0


def cmd_pf(args: argparse.Namespace) -> int:
    cfg = load_run_settings(getattr(args, "config", None))
    net = load_case(args.case)
    u = _dispatch_or_file(args.dispatch, net)
    mats = build_admittances(net)
    op, report = evaluate_setpoint(net, mats, u, None, cfg.feasibility_tol, cfg.pf_tol, cfg.pf_max_iter)
    if not op.solved:
        print(f"infeasible: {', '.join(report.violations())} (no power-flow solution at this dispatch)")
        print(tabulate.tabulate(_dispatch_rows(net, u), headers=["control", "setpoint"], floatfmt=".5f"))
        raise PowerFlowDivergedError(f"power flow diverged for case {net.name}")
    buses = [(bus.id, v, np.degrees(t)) for bus, v, t in zip(net.buses, op.v, op.theta)]
    print(tabulate.tabulate(buses, headers=["bus", "v [p.u.]", "angle [deg]"], floatfmt=".5f"))
    margins = [(name, margin, report.where.get(name, "")) for name, margin in report.margins.items()]
    print(tabulate.tabulate(margins, headers=["constraint", "margin", "at"], floatfmt=".3e"))
    print(f"iterations={op.iterations} mismatch={op.mismatch:.3e} cost={generation_cost(net, mats, op):.6f}")
    print("feasible" if report.feasible else f"infeasible: {', '.join(report.violations())}")
    return 0


COMMANDS = {
    "solve-path": cmd_solve_path,
    "certify": cmd_certify,
    "region-slice": cmd_region_slice,
    "pf": cmd_pf,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging(getattr(args, "log_level", None))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"feaspath: usage error: {exc}", file=sys.stderr)
        return EX_USAGE
    except FeasPathError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
