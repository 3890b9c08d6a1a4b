"""Phase-adjusted AC power flow.

All injections and line flows are linear in the basis vector
``psi = (v_f v_t cos(phi - phi0), v_f v_t sin(phi - phi0), v^2)``, so the square power-flow system reads
``tau(u) + M_eq psi(x, u) = 0`` with state ``x = (theta_ns, v_pq)``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from app.grid.case_io import Network
from app.grid.errors import PowerFlowDivergedError, SingularJacobianError
from app.grid.matrices import AdmittanceSet

logger = logging.getLogger(__name__)

PF_TOL = 1e-8
PF_MAX_ITER = 50

CONSTRAINT_CLASSES = ("p_gen", "q_gen", "voltage", "flow_from", "flow_to", "angle")


@dataclass(frozen=True)
class BasisVector:
    C: np.ndarray
    S: np.ndarray
    Q: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.C, self.S, self.Q])


@dataclass(frozen=True)
class OperatingPoint:
    u: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    solved: bool = True
    iterations: int = 0
    mismatch: float = 0.0

    def phi(self, mats: AdmittanceSet) -> np.ndarray:
        return mats.inc.E.T @ self.theta


@dataclass(frozen=True)
class IntermediateVars:
    p_slack: float
    q_slack: float
    q_pv: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    sf_p: np.ndarray
    sf_q: np.ndarray
    st_p: np.ndarray
    st_q: np.ndarray


@dataclass(frozen=True)
class FlowOperators:
    """Linear maps from the basis vector to injections, intermediate variables and line flows."""

    P: sp.csr_matrix
    Q: sp.csr_matrix
    M_eq: sp.csr_matrix
    M_ineq: sp.csr_matrix
    L_f: sp.csr_matrix
    L_t: sp.csr_matrix
    tau_u: sp.csr_matrix
    tau_c: np.ndarray

    def tau(self, u: np.ndarray) -> np.ndarray:
        return self.tau_u @ u + self.tau_c


@dataclass
class FeasibilityReport:
    margins: dict[str, float] = field(default_factory=dict)
    where: dict[str, str] = field(default_factory=dict)
    tol: float = 1e-6
    solved: bool = True

    @property
    def feasible(self) -> bool:
        return self.solved and all(m >= -self.tol for m in self.margins.values())

    @property
    def worst_margin(self) -> float:
        if not self.solved:
            return -math.inf
        return min(self.margins.values()) if self.margins else math.inf

    def violations(self) -> list[str]:
        if not self.solved:
            return ["power_flow"]
        return [name for name, m in self.margins.items() if m < -self.tol]


def operators(net: Network, mats: AdmittanceSet) -> FlowOperators:
    inc = mats.inc
    P = sp.hstack([mats.G_c, mats.B_s, mats.G_d]).tocsr()
    Q = sp.hstack([-mats.B_c, mats.G_s, -mats.B_d]).tocsr()
    M_eq = sp.vstack([-P[net.non_slack, :], -Q[net.pq, :]]).tocsr()
    slack = [net.slack]
    M_ineq = sp.vstack([P[slack, :], Q[slack, :], Q[net.pv, :]]).tocsr()

    def d(values: np.ndarray) -> sp.dia_matrix:
        return sp.diags(values)

    Gft, Bft = mats.Y_ft_hat.real, mats.Y_ft_hat.imag
    Gtf, Btf = mats.Y_tf_hat.real, mats.Y_tf_hat.imag
    Gff, Bff = mats.Y_ff.real, mats.Y_ff.imag
    Gtt, Btt = mats.Y_tt.real, mats.Y_tt.imag
    L_f = sp.bmat(
        [
            [d(Gft), d(Bft), d(Gff) @ inc.E_f.T],
            [d(-Bft), d(Gft), d(-Bff) @ inc.E_f.T],
        ]
    ).tocsr()
    L_t = sp.bmat(
        [
            [d(Gtf), d(-Btf), d(Gtt) @ inc.E_t.T],
            [d(-Btf), d(-Gtf), d(-Btt) @ inc.E_t.T],
        ]
    ).tocsr()

    layout = net.controls
    C = inc.C.tocsc()
    p_block = sp.hstack(
        [C[:, layout.p_gens], sp.csr_matrix((net.n_bus, layout.n_v + layout.n_q))]
    ).tocsr()
    q_block = sp.hstack(
        [sp.csr_matrix((net.n_bus, layout.n_p + layout.n_v)), C[:, layout.q_gens]]
    ).tocsr()
    tau_u = sp.vstack([p_block[net.non_slack, :], q_block[net.pq, :]]).tocsr()
    tau_c = np.concatenate([-net.p_load[net.non_slack], -net.q_load[net.pq]])
    return FlowOperators(P=P, Q=Q, M_eq=M_eq, M_ineq=M_ineq, L_f=L_f, L_t=L_t, tau_u=tau_u, tau_c=tau_c)


def state_size(net: Network) -> int:
    return len(net.non_slack) + len(net.pq)


def full_state(net: Network, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_ns = len(net.non_slack)
    theta = np.zeros(net.n_bus)
    theta[net.non_slack] = x[:n_ns]
    v = np.zeros(net.n_bus)
    v[net.pq] = x[n_ns:]
    v[net.controls.v_buses] = u[net.controls.sl_v]
    return theta, v


def flat_start(net: Network) -> np.ndarray:
    return np.concatenate([np.zeros(len(net.non_slack)), np.ones(len(net.pq))])


def basis(net: Network, mats: AdmittanceSet, x: np.ndarray, u: np.ndarray) -> BasisVector:
    theta, v = full_state(net, x, u)
    inc = mats.inc
    phi_t = inc.E.T @ theta - mats.phi0
    vv = (inc.E_f.T @ v) * (inc.E_t.T @ v)
    return BasisVector(C=vv * np.cos(phi_t), S=vv * np.sin(phi_t), Q=v * v)


def jacobian(net: Network, mats: AdmittanceSet, x: np.ndarray, u: np.ndarray, ops: Optional[FlowOperators] = None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Return ``(J_f, J_psi)`` with ``J_f = M_eq J_psi``."""
    ops = ops or operators(net, mats)
    theta, v = full_state(net, x, u)
    inc = mats.inc
    phi_t = inc.E.T @ theta - mats.phi0
    vf, vt = inc.E_f.T @ v, inc.E_t.T @ v
    cos, sin = np.cos(phi_t), np.sin(phi_t)

    dphi = inc.E_ns.T
    Ef_pq = inc.E_f[net.pq, :].T
    Et_pq = inc.E_t[net.pq, :].T
    n_pq = len(net.pq)

    dC_dth = sp.diags(-vf * vt * sin) @ dphi
    dC_dv = sp.diags(vt * cos) @ Ef_pq + sp.diags(vf * cos) @ Et_pq
    dS_dth = sp.diags(vf * vt * cos) @ dphi
    dS_dv = sp.diags(vt * sin) @ Ef_pq + sp.diags(vf * sin) @ Et_pq
    dQ_dth = sp.csr_matrix((net.n_bus, len(net.non_slack)))
    dQ_dv = sp.csr_matrix((2.0 * v[net.pq], (net.pq, np.arange(n_pq))), shape=(net.n_bus, n_pq))

    J_psi = sp.bmat([[dC_dth, dC_dv], [dS_dth, dS_dv], [dQ_dth, dQ_dv]]).tocsr()
    J_f = (ops.M_eq @ J_psi).tocsr()
    return J_f, J_psi


def mismatch(net: Network, mats: AdmittanceSet, x: np.ndarray, u: np.ndarray, ops: Optional[FlowOperators] = None) -> np.ndarray:
    ops = ops or operators(net, mats)
    return ops.tau(u) + ops.M_eq @ basis(net, mats, x, u).vector


def factorize(J: sp.spmatrix):
    try:
        lu = splu(sp.csc_matrix(J))
    except RuntimeError as exc:
        raise SingularJacobianError(f"power-flow Jacobian is singular: {exc}") from exc
    diag = np.abs(lu.U.diagonal())
    if diag.size and diag.min() <= 1e-14 * max(diag.max(), 1.0):
        raise SingularJacobianError("power-flow Jacobian is numerically singular")
    return lu


def solve_pf(
    net: Network,
    mats: AdmittanceSet,
    u: np.ndarray,
    x_init: Optional[np.ndarray] = None,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
) -> OperatingPoint:
    """Newton-Raphson on ``tau(u) + M_eq psi(x, u) = 0`` with full steps."""
    ops = operators(net, mats)
    u = np.asarray(u, dtype=float)
    x = flat_start(net) if x_init is None else np.array(x_init, dtype=float)

    for it in range(max_iter + 1):
        f = mismatch(net, mats, x, u, ops)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(norm):
            break
        if norm < tol:
            theta, v = full_state(net, x, u)
            logger.debug("power flow converged in %d iterations, mismatch %.3e", it, norm)
            return OperatingPoint(u=u.copy(), x=x, theta=theta, v=v, solved=True, iterations=it, mismatch=norm)
        if it == max_iter:
            break
        J_f, _ = jacobian(net, mats, x, u, ops)
        x = x - factorize(J_f).solve(f)
        n_ns = len(net.non_slack)
        if np.any(x[n_ns:] <= 0.0):
            break

    raise PowerFlowDivergedError(
        f"power flow did not converge in {max_iter} iterations (mismatch {norm:.3e})",
        iterations=it,
        mismatch=norm,
    )


def intermediates(net: Network, mats: AdmittanceSet, x: np.ndarray, u: np.ndarray, ops: Optional[FlowOperators] = None) -> IntermediateVars:
    ops = ops or operators(net, mats)
    psi = basis(net, mats, x, u).vector
    p_inj = ops.P @ psi
    q_inj = ops.Q @ psi
    sf = ops.L_f @ psi
    st = ops.L_t @ psi
    n_l = net.n_line
    return IntermediateVars(
        p_slack=float(p_inj[net.slack]),
        q_slack=float(q_inj[net.slack]),
        q_pv=q_inj[net.pv],
        p_inj=p_inj,
        q_inj=q_inj,
        sf_p=sf[:n_l],
        sf_q=sf[n_l:],
        st_p=st[:n_l],
        st_q=st[n_l:],
    )


def _record(report: FeasibilityReport, name: str, margins: np.ndarray, labels: list[str]) -> None:
    if margins.size == 0:
        return
    k = int(np.argmin(margins))
    value = float(margins[k])
    if name not in report.margins or value < report.margins[name]:
        report.margins[name] = value
        report.where[name] = labels[k]


def check_feasibility(op: OperatingPoint, net: Network, mats: AdmittanceSet, tol: float = 1e-6) -> FeasibilityReport:
    """Margins of every operational limit class at a solved operating point (negative means violated)."""
    report = FeasibilityReport(tol=tol, solved=op.solved)
    if not op.solved:
        return report
    iv = intermediates(net, mats, op.x, op.u)
    gens = net.generators
    layout = net.controls
    ids = [bus.id for bus in net.buses]

    p_ctrl = op.u[layout.sl_p]
    lo = np.array([gens[g].p_min for g in layout.p_gens])
    hi = np.array([gens[g].p_max for g in layout.p_gens])
    labels = [f"gen {g + 1}" for g in layout.p_gens]
    _record(report, "p_gen", np.concatenate([p_ctrl - lo, hi - p_ctrl]), labels * 2)
    slack_p = iv.p_slack + net.p_load[net.slack]
    slack_lo = sum(gens[g].p_min for g in net.slack_gens)
    slack_hi = sum(gens[g].p_max for g in net.slack_gens)
    _record(report, "p_gen", np.array([slack_p - slack_lo, slack_hi - slack_p]), [f"slack bus {ids[net.slack]}"] * 2)

    q_buses = np.concatenate([[net.slack], net.pv]).astype(int)
    q_gen = np.concatenate([[iv.q_slack], iv.q_pv]) + net.q_load[q_buses]
    q_lo = np.array([sum(g.q_min for g in gens if net.bus_index[g.bus] == pos) for pos in q_buses])
    q_hi = np.array([sum(g.q_max for g in gens if net.bus_index[g.bus] == pos) for pos in q_buses])
    labels = [f"bus {ids[pos]}" for pos in q_buses]
    _record(report, "q_gen", np.concatenate([q_gen - q_lo, q_hi - q_gen]), labels * 2)
    if layout.n_q:
        q_ctrl = op.u[layout.sl_q]
        lo = np.array([gens[g].q_min for g in layout.q_gens])
        hi = np.array([gens[g].q_max for g in layout.q_gens])
        _record(report, "q_gen", np.concatenate([q_ctrl - lo, hi - q_ctrl]), [f"gen {g + 1}" for g in layout.q_gens] * 2)

    labels = [f"bus {i}" for i in ids]
    _record(report, "voltage", np.concatenate([op.v - net.v_min, net.v_max - op.v]), labels * 2)

    line_labels = [f"line {br.from_bus}-{br.to_bus}" for br in net.branches]
    limited = np.array([br.s_max is not None for br in net.branches], dtype=bool)
    if limited.any():
        s_max = np.array([br.s_max or 0.0 for br in net.branches])
        sf = np.hypot(iv.sf_p, iv.sf_q)
        st = np.hypot(iv.st_p, iv.st_q)
        keep = list(np.flatnonzero(limited))
        _record(report, "flow_from", (s_max - sf)[keep], [line_labels[k] for k in keep])
        _record(report, "flow_to", (s_max - st)[keep], [line_labels[k] for k in keep])

    phi = mats.inc.E.T @ op.theta
    a_lo = np.array([br.angle_min for br in net.branches])
    a_hi = np.array([br.angle_max for br in net.branches])
    _record(report, "angle", np.concatenate([phi - a_lo, a_hi - phi]), line_labels * 2)
    return report


def evaluate_setpoint(
    net: Network,
    mats: AdmittanceSet,
    u: np.ndarray,
    x_init: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    pf_tol: float = PF_TOL,
    pf_max_iter: int = PF_MAX_ITER,
) -> tuple[OperatingPoint, FeasibilityReport]:
    """Solve the power flow at ``u`` and assess it; a divergent solve yields an unsolved point."""
    try:
        op = solve_pf(net, mats, u, x_init, tol=pf_tol, max_iter=pf_max_iter)
    except (PowerFlowDivergedError, SingularJacobianError) as exc:
        logger.debug("setpoint has no power-flow solution: %s", exc)
        x = flat_start(net) if x_init is None else np.asarray(x_init, dtype=float)
        theta, v = full_state(net, x, u)
        op = OperatingPoint(u=np.asarray(u, dtype=float), x=x, theta=theta, v=v, solved=False)
    return op, check_feasibility(op, net, mats, tol)


def generation_cost(net: Network, mats: AdmittanceSet, op: OperatingPoint) -> float:
    """True cost of the solved point; several slack-bus generators share the slack output economically."""
    layout = net.controls
    gens = net.generators
    total = sum(gens[g].cost_of(p) for g, p in zip(layout.p_gens, op.u[layout.sl_p]))
    iv = intermediates(net, mats, op.x, op.u)
    slack_p = iv.p_slack + net.p_load[net.slack]
    total += slack_cost(net, slack_p)
    return float(total)


def split_slack(net: Network, slack_p: float) -> np.ndarray:
    """Least-cost split of the slack output over the slack-bus generators (equal marginal cost)."""
    gens = [net.generators[g] for g in net.slack_gens]
    if len(gens) == 1:
        return np.array([slack_p])
    lo = np.array([g.p_min for g in gens])
    hi = np.array([g.p_max for g in gens])
    c2 = np.array([max(g.cost[0], 1e-9) for g in gens])
    c1 = np.array([g.cost[1] for g in gens])
    if slack_p <= lo.sum() or slack_p >= hi.sum():
        out = lo.copy() if slack_p <= lo.sum() else hi.copy()
        out[0] += slack_p - out.sum()
        return out

    def alloc(lam: float) -> np.ndarray:
        return np.clip((lam - c1) / (2.0 * c2), lo, hi)

    lam_lo = float(np.min(c1 + 2.0 * c2 * lo))
    lam_hi = float(np.max(c1 + 2.0 * c2 * hi))
    for _ in range(200):
        lam = 0.5 * (lam_lo + lam_hi)
        if alloc(lam).sum() < slack_p:
            lam_lo = lam
        else:
            lam_hi = lam
    return alloc(0.5 * (lam_lo + lam_hi))


def slack_cost(net: Network, slack_p: float) -> float:
    split = split_slack(net, slack_p)
    return float(sum(net.generators[g].cost_of(p) for g, p in zip(net.slack_gens, split)))
