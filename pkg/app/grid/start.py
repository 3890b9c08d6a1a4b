"""Start setpoints for cases whose file dispatch is not feasible.

``dc_dispatch`` spreads the non-slack generators over their ranges under a DC flow model with derated
line and angle limits, keeping headroom at the slack for losses. ``uniform_cost_start`` then runs a
cost-mode path with every generator priced at one unit per MW and returns its final setpoint.
"""

import logging
from dataclasses import replace
from typing import Optional

import cvxpy as cp
import numpy as np

from app.config import RunSettings, SolverSettings
from app.grid.case_io import Network
from app.grid.errors import InfeasibleStartError
from app.grid.matrices import build_admittances, build_incidence
from app.grid.powerflow import evaluate_setpoint
from app.grid.sequential import run

logger = logging.getLogger(__name__)


def _derated_box(lo: np.ndarray, hi: np.ndarray, derate: float) -> tuple[np.ndarray, np.ndarray]:
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * derate
    return mid - half, mid + half


def dc_dispatch_powers(
    net: Network,
    settings: Optional[SolverSettings] = None,
    derate: float = 0.9,
    loss_margin: float = 0.05,
) -> np.ndarray:
    """Per-generator active powers (p.u.) of the DC dispatch closest to the middle of each range."""
    if not 0 < derate <= 1:
        raise ValueError(f"derate must lie in (0, 1], got {derate}")
    if loss_margin < 0:
        raise ValueError(f"loss_margin must be non-negative, got {loss_margin}")
    settings = settings or SolverSettings()
    inc = build_incidence(net)
    gens = net.generators
    p_min = np.array([g.p_min for g in gens])
    p_max = np.array([g.p_max for g in gens])
    x = np.array([br.x * br.tap for br in net.branches])
    shift = np.array([br.shift for br in net.branches])
    b = 1.0 / x
    g_sh = np.array([bus.shunt_g for bus in net.buses])

    p_gen = cp.Variable(net.n_gen)
    theta = cp.Variable(net.n_bus)
    phi = inc.E.T @ theta
    flow = cp.multiply(b, phi - shift)
    cons = [
        theta[net.slack] == 0.0,
        inc.C @ p_gen - net.p_load - g_sh == inc.E @ flow,
        p_gen >= p_min,
        p_gen <= p_max,
    ]
    a_lo, a_hi = _derated_box(
        np.array([br.angle_min for br in net.branches]), np.array([br.angle_max for br in net.branches]), derate
    )
    cons += [phi >= a_lo, phi <= a_hi]
    limited = [k for k, br in enumerate(net.branches) if br.s_max is not None]
    if limited:
        s_max = np.array([net.branches[k].s_max for k in limited])
        cons.append(cp.abs(flow[limited]) <= derate * s_max)

    slack = net.slack_gens
    headroom = loss_margin * float(np.sum(net.p_load))
    cons.append(cp.sum(p_gen[slack]) <= float(p_max[slack].sum()) - headroom)

    spread = np.maximum(p_max - p_min, 1e-6)
    mid = 0.5 * (p_min + p_max)
    problem = cp.Problem(cp.Minimize(cp.sum_squares(cp.multiply(1.0 / spread, p_gen - mid))), cons)
    try:
        problem.solve(solver=settings.solver.upper(), verbose=settings.verbose)
    except cp.error.SolverError as exc:
        raise InfeasibleStartError(f"DC dispatch failed: {exc}") from exc
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or p_gen.value is None:
        raise InfeasibleStartError(f"DC dispatch ended with status {problem.status}")
    return np.clip(np.asarray(p_gen.value, dtype=float), p_min, p_max)


def dc_dispatch(
    net: Network,
    settings: Optional[SolverSettings] = None,
    derate: float = 0.9,
    loss_margin: float = 0.05,
    tol: float = 1e-6,
) -> np.ndarray:
    """Control vector of the DC dispatch, checked against the full power flow.

    Generator voltages come from the file setpoints, then from a flat 1.0 p.u., clipped to the bus limits.
    """
    pg = dc_dispatch_powers(net, settings, derate, loss_margin)
    gens = net.generators
    qg = np.clip([g.q for g in gens], [g.q_min for g in gens], [g.q_max for g in gens])
    v_lo, v_hi = net.v_min[net.gen_bus], net.v_max[net.gen_bus]
    mats = build_admittances(net)
    report = None
    for vg in (np.array([g.v_setpoint for g in gens]), np.ones(net.n_gen)):
        u = net.u_from_dispatch(pg, np.clip(vg, v_lo, v_hi), qg)
        _, report = evaluate_setpoint(net, mats, u, None, tol)
        if report.feasible:
            logger.info("DC start: case=%s total_p=%.4f worst_margin=%.3e", net.name, float(pg.sum()), report.worst_margin)
            return u
        logger.debug("DC start with voltages %s violates %s", np.round(vg, 4).tolist(), report.violations())
    raise InfeasibleStartError(f"DC dispatch is not AC feasible: {', '.join(report.violations())}", report=report)


def uniform_cost_network(net: Network) -> Network:
    """Same network with every generator priced at one unit per MW."""
    cost = (0.0, float(net.base_mva), 0.0)
    return replace(net, generators=tuple(replace(g, cost=cost) for g in net.generators))


def uniform_cost_start(net: Network, start: Optional[np.ndarray] = None, config: Optional[RunSettings] = None) -> np.ndarray:
    """Final setpoint of a cost-mode path under uniform linear costs, from ``start`` or the DC dispatch."""
    cfg = (config or RunSettings()).model_copy(update={"objective": "cost"})
    if start is None:
        start = dc_dispatch(net, cfg.solver, tol=cfg.feasibility_tol)
    path = run(uniform_cost_network(net), start, cfg)
    logger.info("uniform-cost start: case=%s iterations=%d total_mw=%.3f", net.name, path.iterations, path.final_cost)
    return path.final
