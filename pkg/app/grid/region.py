"""Two-axis slices of the control space and sampling from inside a restriction."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.config import SolverSettings
from app.grid.case_io import Network
from app.grid.conic import CompiledProgram, Lin
from app.grid.errors import PowerFlowDivergedError
from app.grid.matrices import build_admittances, build_incidence
from app.grid.powerflow import evaluate_setpoint
from app.grid.restriction import RestrictionProblem, build_restriction

logger = logging.getLogger(__name__)

IN_RESTRICTION = "in_restriction"
FEASIBLE = "feasible"
INFEASIBLE = "infeasible"


@dataclass
class RegionSlice:
    axes: tuple[str, str]
    x: np.ndarray
    y: np.ndarray
    # labels[i, j] classifies the point (x[j], y[i])
    labels: np.ndarray
    base_u: np.ndarray
    certificate_violations: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def restriction_at(net: Network, base_u: np.ndarray, pf_tol: float = 1e-8, pf_max_iter: int = 50) -> RestrictionProblem:
    """Solve the power flow at ``base_u`` and assemble the restriction around it."""
    inc = build_incidence(net)
    mats0 = build_admittances(net, inc=inc)
    op, _ = evaluate_setpoint(net, mats0, base_u, pf_tol=pf_tol, pf_max_iter=pf_max_iter)
    if not op.solved:
        raise PowerFlowDivergedError("base setpoint of the slice has no power-flow solution")
    mats = build_admittances(net, phi0=inc.E.T @ op.theta, inc=inc)
    return build_restriction(net, mats, op)


def _classify_rows(
    net: Network,
    prob: RestrictionProblem,
    base_u: np.ndarray,
    ix: int,
    iy: int,
    xs: np.ndarray,
    ys: np.ndarray,
    settings: Optional[SolverSettings],
    tol: float,
) -> tuple[np.ndarray, int]:
    """Labels of the rows ``ys``; each call compiles its own membership program."""
    member = prob.compile_membership(settings)
    mats = build_admittances(net)
    labels = np.empty((len(ys), len(xs)), dtype=object)
    violations = 0
    for i, yv in enumerate(ys):
        x_warm = None
        for j, xv in enumerate(xs):
            u = base_u.copy()
            u[ix], u[iy] = xv, yv
            inside = member.solve(u).optimal
            op, report = evaluate_setpoint(net, mats, u, x_warm, tol)
            if op.solved:
                x_warm = op.x
            if inside:
                labels[i, j] = IN_RESTRICTION
                if not report.feasible:
                    violations += 1
                    logger.warning("point (%g, %g) is inside the restriction but fails %s", xv, yv, report.violations())
            else:
                labels[i, j] = FEASIBLE if report.feasible else INFEASIBLE
    return labels, violations


def classify_grid(
    net: Network,
    base_u: np.ndarray,
    axes: tuple[str, str],
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    n: int,
    settings: Optional[SolverSettings] = None,
    tol: float = 1e-6,
    workers: int = 1,
) -> RegionSlice:
    """Label an ``n x n`` grid over two controls; all other controls stay at ``base_u``.

    With ``workers > 1`` bands of rows are classified on a thread pool.
    """
    if n < 1:
        raise ValueError("grid size must be positive")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    ix, iy = net.control_index(axes[0]), net.control_index(axes[1])
    if ix == iy:
        raise ValueError("slice axes must differ")
    base_u = np.asarray(base_u, dtype=float)
    prob = restriction_at(net, base_u)

    xs = np.linspace(x_range[0], x_range[1], n)
    ys = np.linspace(y_range[0], y_range[1], n)
    bands = [band for band in np.array_split(ys, min(workers, n)) if band.size]
    if len(bands) > 1:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            parts = list(pool.map(lambda band: _classify_rows(net, prob, base_u, ix, iy, xs, band, settings, tol), bands))
    else:
        parts = [_classify_rows(net, prob, base_u, ix, iy, xs, ys, settings, tol)]
    labels = np.vstack([part[0] for part in parts])
    violations = sum(part[1] for part in parts)

    counts = {name: int(np.sum(labels == name)) for name in (IN_RESTRICTION, FEASIBLE, INFEASIBLE)}
    logger.info("region slice %s x %s: %s, certificate violations %d", axes[0], axes[1], counts, violations)
    return RegionSlice(axes=axes, x=xs, y=ys, labels=labels, base_u=base_u, certificate_violations=violations, counts=counts)


def sample_restriction(
    prob: RestrictionProblem,
    n: int,
    rng: np.random.Generator,
    settings: Optional[SolverSettings] = None,
    directions: Optional[int] = None,
) -> np.ndarray:
    """``n`` control vectors inside the restriction: convex combinations of extreme points along random directions."""
    n_u = prob.u_idx.size
    extremes = [prob.base.u.copy()]
    for _ in range(directions or max(2 * n_u, 4)):
        c = rng.standard_normal(n_u)
        objective = Lin(prob.u_idx, c)
        result = CompiledProgram(prob.program, settings, objective=objective).solve()
        if result.optimal:
            extremes.append(prob.u_of(result.z))
        else:
            logger.warning("extreme-point solve ended with status %s", result.status.value)
    U = np.vstack(extremes)
    weights = rng.dirichlet(np.ones(len(extremes)), size=n)
    return weights @ U
