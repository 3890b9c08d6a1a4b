"""Feasible path identification by sequential convex restriction.

Each iteration re-linearizes around the last certified setpoint, solves the restriction and moves to its
optimum. Consecutive setpoints lie in one convex restriction, so the straight segment between them is feasible.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from app.config import RunSettings
from app.grid import conic
from app.grid.case_io import Network
from app.grid.envelopes import PolytopeBounds
from app.grid.errors import (
    CertificationError,
    ConfigurationError,
    FeasPathError,
    InfeasibleStartError,
    PowerFlowDivergedError,
    SolverFailureError,
)
from app.grid.matrices import AdmittanceSet, build_admittances, build_incidence
from app.grid.powerflow import (
    CONSTRAINT_CLASSES,
    FeasibilityReport,
    OperatingPoint,
    evaluate_setpoint,
    generation_cost,
)
from app.grid.restriction import build_restriction, objective_cost, objective_distance

logger = logging.getLogger(__name__)

RunConfig = RunSettings

TERMINATION_CONVERGED = "converged"
TERMINATION_MAX_ITERATIONS = "max_iterations"


@dataclass
class FeasiblePath:
    setpoints: list[np.ndarray]
    points: list[OperatingPoint]
    costs: list[float]
    objectives: list[float] = field(default_factory=list)
    bounds: list[PolytopeBounds] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)
    solver_times: list[float] = field(default_factory=list)
    reports: list[FeasibilityReport] = field(default_factory=list)
    termination: str = ""
    diagnostics: list[str] = field(default_factory=list)
    certificate: Optional["CertificationReport"] = None

    @property
    def iterations(self) -> int:
        return len(self.setpoints) - 1

    @property
    def start(self) -> np.ndarray:
        return self.setpoints[0]

    @property
    def final(self) -> np.ndarray:
        return self.setpoints[-1]

    @property
    def initial_cost(self) -> float:
        return self.costs[0]

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


@dataclass(frozen=True)
class CertificateFailure:
    segment: int
    alpha: float
    constraint: str
    margin: float


@dataclass
class CertificationReport:
    segments: int = 0
    samples: int = 0
    worst: dict[str, float] = field(default_factory=dict)
    failures: list[CertificateFailure] = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return not self.failures

    def raise_for_failure(self) -> None:
        if self.failures:
            first = self.failures[0]
            raise CertificationError(
                f"path is not feasible: segment {first.segment}, alpha {first.alpha:.3f}, "
                f"{first.constraint} margin {first.margin:.3e} ({len(self.failures)} failing samples)",
                segment=first.segment,
                alpha=first.alpha,
                constraint=first.constraint,
            )


def _abort(exc: FeasPathError, path: FeasiblePath) -> FeasPathError:
    path.termination = type(exc).__name__
    exc.path = path
    return exc


def run(
    net: Network,
    start_u: np.ndarray,
    config: Optional[RunConfig] = None,
    target: Optional[np.ndarray] = None,
) -> FeasiblePath:
    """Iterate restrictions from ``start_u`` until the step norm drops to ``epsilon``."""
    cfg = config or RunSettings()
    layout = net.controls
    u = np.array(start_u, dtype=float)
    if u.shape != (layout.size,):
        raise ConfigurationError(f"start has {u.size} entries, the control vector has {layout.size}")
    if cfg.objective == "distance":
        if target is None:
            raise ConfigurationError("distance objective needs a target setpoint")
        target = np.asarray(target, dtype=float)
        if target.shape != (layout.size,):
            raise ConfigurationError(f"target has {target.size} entries, the control vector has {layout.size}")

    inc = build_incidence(net)
    mats0 = build_admittances(net, inc=inc)
    op, report = evaluate_setpoint(net, mats0, u, None, cfg.feasibility_tol, cfg.pf_tol, cfg.pf_max_iter)
    if not report.feasible:
        raise InfeasibleStartError(f"start setpoint is not feasible: {', '.join(report.violations())}", report=report)

    path = FeasiblePath(setpoints=[u.copy()], points=[op], costs=[generation_cost(net, mats0, op)], reports=[report])
    logger.info("path start: case=%s objective=%s cost=%.6f", net.name, cfg.objective, path.costs[0])

    path.termination = TERMINATION_MAX_ITERATIONS
    for k in range(cfg.max_iterations):
        mats = build_admittances(net, phi0=inc.E.T @ op.theta, inc=inc)
        try:
            prob = build_restriction(net, mats, op)
            if cfg.objective == "cost":
                prob.program.set_objective(objective_cost(prob))
            else:
                prob.program.set_objective(objective_distance(prob, target, cfg.lam))
        except FeasPathError as exc:
            raise _abort(exc, path) from exc
        path.diagnostics.extend(prob.diagnostics)

        started = time.perf_counter()
        result = conic.solve_with_retries(prob.program, cfg.solver)
        solver_time = time.perf_counter() - started
        if not result.optimal:
            exc = SolverFailureError(f"iteration {k + 1}: restriction solve ended with status {result.status.value}", result=result)
            raise _abort(exc, path)

        u_new = prob.u_of(result.z)
        step = float(np.linalg.norm(u_new - u))
        op_new, report = evaluate_setpoint(net, mats0, u_new, op.x, cfg.feasibility_tol, cfg.pf_tol, cfg.pf_max_iter)
        if not op_new.solved:
            exc = PowerFlowDivergedError(f"iteration {k + 1}: power flow diverged at the restriction optimum")
            raise _abort(exc, path)
        if not report.feasible:
            exc = CertificationError(
                f"iteration {k + 1}: restriction optimum violates {', '.join(report.violations())}",
                segment=k,
                alpha=0.0,
                constraint=report.violations()[0],
            )
            raise _abort(exc, path)

        cost = generation_cost(net, mats0, op_new)
        path.setpoints.append(u_new)
        path.points.append(op_new)
        path.costs.append(cost)
        path.objectives.append(result.objective)
        path.bounds.append(prob.bounds_of(result.z))
        path.step_norms.append(step)
        path.solver_times.append(solver_time)
        path.reports.append(report)
        logger.info(
            "event=iteration iteration=%d objective=%.6f cost=%.6f step_norm=%.6g solver_time=%.3f pf_iterations=%d",
            k + 1,
            result.objective,
            cost,
            step,
            solver_time,
            op_new.iterations,
        )
        u, op = u_new, op_new
        if step <= cfg.epsilon:
            path.termination = TERMINATION_CONVERGED
            break

    logger.info("path done: termination=%s iterations=%d cost=%.6f", path.termination, path.iterations, path.final_cost)
    return path


def _certify_segment(
    net: Network,
    mats: AdmittanceSet,
    seg: int,
    u_a: np.ndarray,
    u_b: np.ndarray,
    grid: np.ndarray,
    x_start: Optional[np.ndarray],
    tol: float,
    pf_tol: float,
    pf_max_iter: int,
) -> CertificationReport:
    part = CertificationReport()
    x_warm = x_start
    for alpha in grid[::-1]:
        u = alpha * u_a + (1.0 - alpha) * u_b
        op, check = evaluate_setpoint(net, mats, u, x_warm, tol, pf_tol, pf_max_iter)
        part.samples += 1
        if not op.solved:
            part.failures.append(CertificateFailure(seg, float(alpha), "power_flow", -np.inf))
            continue
        x_warm = op.x
        for name, margin in check.margins.items():
            part.worst[name] = min(part.worst.get(name, np.inf), margin)
        for name in check.violations():
            part.failures.append(CertificateFailure(seg, float(alpha), name, check.margins[name]))
    return part


def certify_path(
    path: Union[FeasiblePath, Sequence[np.ndarray]],
    net: Network,
    samples_per_segment: int = 11,
    tol: float = 1e-6,
    pf_tol: float = 1e-8,
    pf_max_iter: int = 50,
    workers: int = 1,
) -> CertificationReport:
    """Sample every segment on a uniform grid (endpoints included) and check each point independently.

    Segments are independent; with ``workers > 1`` they are checked on a thread pool and merged in order.
    """
    setpoints = path.setpoints if isinstance(path, FeasiblePath) else [np.asarray(u, dtype=float) for u in path]
    if not setpoints:
        raise ValueError("cannot certify an empty path")
    if samples_per_segment < 2:
        raise ValueError("need at least two samples per segment")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    mats = build_admittances(net)
    pairs = list(zip(setpoints[:-1], setpoints[1:])) or [(setpoints[0], setpoints[0])]
    grid = np.linspace(0.0, 1.0, samples_per_segment) if len(setpoints) > 1 else np.array([1.0])
    warm = [p.x for p in path.points] if isinstance(path, FeasiblePath) else [None] * len(setpoints)

    def check(seg: int) -> CertificationReport:
        u_a, u_b = pairs[seg]
        return _certify_segment(net, mats, seg, u_a, u_b, grid, warm[seg], tol, pf_tol, pf_max_iter)

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(check, range(len(pairs))))
    else:
        parts = [check(seg) for seg in range(len(pairs))]

    report = CertificationReport(segments=len(setpoints) - 1)
    for part in parts:
        report.samples += part.samples
        report.failures.extend(part.failures)
        for name, margin in part.worst.items():
            report.worst[name] = min(report.worst.get(name, np.inf), margin)
    report.worst = {name: report.worst[name] for name in CONSTRAINT_CLASSES if name in report.worst}
    if isinstance(path, FeasiblePath):
        path.certificate = report
    logger.info("certification: segments=%d samples=%d failures=%d", report.segments, report.samples, len(report.failures))
    return report


def optimality_gap(cost_i: float, cost_ref: float) -> float:
    if not cost_ref > 0:
        raise ValueError(f"reference cost must be positive, got {cost_ref}")
    return (cost_i - cost_ref) / cost_ref


def straight_line(start: np.ndarray, target: np.ndarray, segments: int = 1) -> list[np.ndarray]:
    """Naive path from ``start`` to ``target`` split into equal segments."""
    if segments < 1:
        raise ValueError("segments must be at least 1")
    start, target = np.asarray(start, dtype=float), np.asarray(target, dtype=float)
    return [start + (target - start) * (k / segments) for k in range(segments + 1)]


@dataclass
class SweepResult:
    lam: float
    path: FeasiblePath
    p_residual: float
    v_residual: float

    @property
    def iterations(self) -> int:
        return self.path.iterations


def lambda_sweep(
    net: Network,
    start: np.ndarray,
    target: np.ndarray,
    lams: Sequence[float] = (0.1, 1.0, 10.0),
    config: Optional[RunConfig] = None,
) -> list[SweepResult]:
    """Distance-mode runs per weight with the final residuals of the power and voltage components."""
    base = config or RunSettings()
    layout = net.controls
    target = np.asarray(target, dtype=float)
    out = []
    for lam in lams:
        cfg = base.model_copy(update={"objective": "distance", "lam": float(lam)})
        path = run(net, start, cfg, target)
        resid = path.final - target
        p_part = np.concatenate([resid[layout.sl_p], resid[layout.sl_q]])
        out.append(
            SweepResult(
                lam=float(lam),
                path=path,
                p_residual=float(np.max(np.abs(p_part), initial=0.0)),
                v_residual=float(np.max(np.abs(resid[layout.sl_v]), initial=0.0)),
            )
        )
        logger.info("lambda sweep: lam=%g iterations=%d p_residual=%.3e v_residual=%.3e", lam, path.iterations, out[-1].p_residual, out[-1].v_residual)
    return out
