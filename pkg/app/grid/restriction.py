"""Convex restriction of the feasible set around a solved base point.

Every control ``u`` admitted by the assembled program has a power-flow solution inside the box ``P(b)``
that satisfies all operational limits. The program is a convex QCQP over ``u``, the box ``b`` and
per-line / per-bus auxiliary bound variables.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from app.config import SolverSettings
from app.grid.case_io import Network
from app.grid.conic import CompiledProgram, ConicProgram, Lin, Quad, square, stack_lins
from app.grid.envelopes import (
    LineGeometry,
    LineTerms,
    PolytopeBounds,
    angle_coefficients,
    bound_g_over_polytope,
    bound_psi_over_polytope,
    build_geometry,
    cosine_candidates,
    envelope_max,
    envelope_min,
    g_cos_lower,
    g_cos_upper,
    g_sin_candidates,
    line_terms,
    polytope_matrix,
    product_candidates,
    product_range,
    psi_cos_shift,
    sine_candidates,
    sine_residual_candidates,
)
from app.grid.errors import ConfigurationError
from app.grid.matrices import AdmittanceSet
from app.grid.powerflow import FlowOperators, OperatingPoint, factorize, intermediates, jacobian, operators, split_slack

logger = logging.getLogger(__name__)

K_CLEANUP = 1e-12
# cone rows whose base loading exceeds this fraction of the rating are reported
CONE_LOADING_WARN = 0.999
CONE_RATING_MIN = 1e-6


@dataclass
class RestrictionProblem:
    net: Network
    mats: AdmittanceSet
    ops: FlowOperators
    base: OperatingPoint
    geom: LineGeometry
    K: sp.csr_matrix
    K_plus: sp.csr_matrix
    K_minus: sp.csr_matrix
    AJinv: np.ndarray
    program: ConicProgram
    u_idx: np.ndarray
    phi_hi_idx: np.ndarray
    phi_lo_idx: np.ndarray
    v_hi_idx: np.ndarray
    v_lo_idx: np.ndarray
    aux: dict[str, np.ndarray]
    limited: np.ndarray
    p_bar_idx: np.ndarray
    coeffs: tuple[np.ndarray, np.ndarray]
    diagnostics: list[str] = field(default_factory=list)

    @property
    def v0(self) -> np.ndarray:
        return self.base.v

    @property
    def phi0(self) -> np.ndarray:
        return self.mats.phi0

    @property
    def quadratic_rows(self) -> int:
        return self.program.n_quadratic_rows

    @property
    def row_bound(self) -> int:
        return 30 * self.net.n_line + 4 * self.net.n_bus + 4 * self.net.n_gen

    def u_of(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z)[self.u_idx].copy()

    def bounds_of(self, z: np.ndarray) -> PolytopeBounds:
        z = np.asarray(z)
        return PolytopeBounds(
            phi_hi=z[self.phi_hi_idx].copy(),
            phi_lo=z[self.phi_lo_idx].copy(),
            v_hi=z[self.v_hi_idx].copy(),
            v_lo=z[self.v_lo_idx].copy(),
        )

    def g_bounds(self, u: np.ndarray, bounds: PolytopeBounds):
        return bound_g_over_polytope(self.net, self.geom, self.v0, self.phi0, u, bounds, self.coeffs)

    def psi_bounds(self, u: np.ndarray, bounds: PolytopeBounds):
        return bound_psi_over_polytope(self.net, self.geom, self.v0, self.phi0, u, bounds, self.coeffs)

    def assignment(self, u: np.ndarray, bounds: PolytopeBounds) -> np.ndarray:
        """Program vector with the tightest auxiliary values for ``(u, b)``; rows involving ``b`` may still be violated."""
        n = self.program.n_vars
        z = np.zeros(n)
        z[self.u_idx] = u
        z[self.phi_hi_idx], z[self.phi_lo_idx] = bounds.phi_hi, bounds.phi_lo
        z[self.v_hi_idx], z[self.v_lo_idx] = bounds.v_hi, bounds.v_lo

        lt = line_terms(self.net, self.geom, self.v0, self.phi0, u, bounds, self.coeffs)
        up, down = product_candidates(lt)
        r_hi, r_lo = envelope_max(up), envelope_min(down)
        up, down = sine_candidates(lt)
        s_hi, s_lo = envelope_max(up), envelope_min(down)
        c_lo = np.minimum(envelope_min(cosine_candidates(lt)), 0.0)
        up, down = sine_residual_candidates(lt)
        m_hi, m_lo = envelope_max(up), envelope_min(down)
        g = self.g_bounds(u, bounds)
        values = {
            "r_hi": r_hi, "r_lo": r_lo, "s_hi": s_hi, "s_lo": s_lo, "c_lo": c_lo,
            "m_hi": m_hi, "m_lo": m_lo, "gc_lo": g.C_lo, "gs_hi": g.S_hi, "gs_lo": g.S_lo, "gq_hi": g.Q_hi,
        }
        for name, idx in self.aux.items():
            if name in values:
                z[idx] = values[name]

        psi = self.psi_bounds(u, bounds)
        n_l = self.net.n_line
        for which, L in (("f", self.ops.L_f), ("t", self.ops.L_t)):
            Lp, Lm = L.maximum(0), L.minimum(0)
            hi = Lp @ psi.upper + Lm @ psi.lower
            lo = Lp @ psi.lower + Lm @ psi.upper
            mag = np.maximum(np.abs(hi), np.abs(lo))
            z[self.aux[f"s{which}_p"]] = mag[:n_l][self.limited]
            z[self.aux[f"s{which}_q"]] = mag[n_l:][self.limited]

        M = self.ops.M_ineq[[0], :]
        p_need = float((M.maximum(0) @ psi.upper + M.minimum(0) @ psi.lower)[0]) + self.net.p_load[self.net.slack]
        z[self.p_bar_idx] = split_slack(self.net, p_need)
        return z

    def compile_membership(self, settings: Optional[SolverSettings] = None) -> CompiledProgram:
        """Feasibility program with ``u`` pinned by a parameter, built once and re-solved per point."""
        return CompiledProgram(self.program, settings, fixed=self.u_idx, objective=0.0)


def _split(K: np.ndarray, cleanup: float = K_CLEANUP) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    K = np.where(np.abs(K) > cleanup, K, 0.0)
    return K, np.maximum(K, 0.0), np.minimum(K, 0.0)


def build_restriction(net: Network, mats: AdmittanceSet, base: OperatingPoint) -> RestrictionProblem:
    """Assemble the restriction around ``base``; ``mats`` must be built with ``phi0`` equal to the base angles."""
    if not base.solved:
        raise ValueError("restriction needs a solved base point")
    ops = operators(net, mats)
    geom = build_geometry(net)
    n_l, n_b = net.n_line, net.n_bus
    pq, n_pq = net.pq, len(net.pq)
    layout = net.controls
    v0 = base.v
    phi0 = mats.phi0
    phi_base = base.phi(mats)
    if np.max(np.abs(phi_base - phi0), initial=0.0) > 1e-9:
        raise ValueError("admittances must be phase-adjusted to the base angles")

    J_f, _ = jacobian(net, mats, base.x, base.u, ops)
    lu = factorize(J_f)
    A = polytope_matrix(net, mats.inc)
    AJinv = lu.solve(np.asarray(A.T.todense()), trans="T").T if A.shape[0] else np.zeros((0, J_f.shape[0]))
    K, K_plus, K_minus = _split(-(ops.M_eq.T @ AJinv.T).T)

    prog = ConicProgram()
    u_lo, u_hi = net.control_bounds()
    u_idx = prog.add_variables("u", layout.size, u_lo, u_hi)
    a_min = np.array([br.angle_min for br in net.branches])
    a_max = np.array([br.angle_max for br in net.branches])
    phi_top = np.minimum(a_max, phi0 + math.pi)
    phi_bot = np.maximum(a_min, phi0 - math.pi)
    phi_hi_idx = prog.add_variables("phi_hi", n_l, phi0, phi_top)
    phi_lo_idx = prog.add_variables("phi_lo", n_l, phi_bot, phi0)
    v_hi_idx = prog.add_variables("v_hi", n_pq, v0[pq], net.v_max[pq])
    v_lo_idx = prog.add_variables("v_lo", n_pq, net.v_min[pq], v0[pq])

    aux: dict[str, np.ndarray] = {}
    for name, ub in (("r_hi", math.inf), ("r_lo", math.inf), ("s_hi", math.inf), ("s_lo", math.inf), ("c_lo", 0.0),
                     ("m_hi", math.inf), ("m_lo", math.inf), ("gc_lo", math.inf), ("gs_hi", math.inf), ("gs_lo", math.inf)):
        aux[name] = prog.add_variables(name, n_l, -math.inf, ub)
    aux["gq_hi"] = prog.add_variables("gq_hi", n_b)

    coeffs = angle_coefficients(phi0, a_min, a_max)
    diagnostics: list[str] = []
    degenerate = np.flatnonzero((phi_top - phi0 <= 0.0) | (phi0 - phi_bot <= 0.0))
    if degenerate.size:
        msg = f"{degenerate.size} line(s) have the base angle on a limit; their sine envelopes are linear on that side"
        logger.warning(msg)
        diagnostics.append(msg)

    def v_dev(bus: int, high: bool) -> Lin:
        k = geom.pq_pos[bus]
        if k >= 0:
            return Lin.var(int(v_hi_idx[k] if high else v_lo_idx[k])) - v0[bus]
        return Lin.var(int(geom.v_ctrl_pos[bus])) - v0[bus]

    var = Lin.var
    gc_hi: list[Lin] = []
    psi_c_hi: list[Lin] = []
    psi_c_lo: list[Lin] = []
    for l in range(n_l):
        f, t = int(geom.f[l]), int(geom.t[l])
        lt = LineTerms(
            df_lo=v_dev(f, False),
            df_hi=v_dev(f, True),
            dt_lo=v_dev(t, False),
            dt_hi=v_dev(t, True),
            ph_lo=var(int(phi_lo_idx[l])) - phi0[l],
            ph_hi=var(int(phi_hi_idx[l])) - phi0[l],
            v0f=float(v0[f]),
            v0t=float(v0[t]),
            f_pq=bool(geom.f_pq[l]),
            t_pq=bool(geom.t_pq[l]),
            k_under=float(coeffs[0][l]),
            k_over=float(coeffs[1][l]),
            f_fixed=not geom.f_pq[l],
            t_fixed=not geom.t_pq[l],
        )
        a = {name: var(int(idx[l])) for name, idx in aux.items() if name != "gq_hi"}

        up, down = product_candidates(lt)
        for c in up:
            prog.add_le(c, a["r_hi"], tag="voltage_product")
        for c in down:
            prog.add_le(a["r_lo"], c, tag="voltage_product")
        up, down = sine_candidates(lt)
        for c in up:
            prog.add_le(c, a["s_hi"], tag="sine")
        for c in down:
            prog.add_le(a["s_lo"], c, tag="sine")
        for c in cosine_candidates(lt):
            prog.add_le(a["c_lo"], c, tag="cosine")
        up, down = sine_residual_candidates(lt)
        for c in up:
            prog.add_le(c, a["m_hi"], tag="sine_residual")
        for c in down:
            prog.add_le(a["m_lo"], c, tag="sine_residual")

        w_hi, w_lo = product_range(lt, a["r_hi"], a["r_lo"])
        prog.add_le(a["gc_lo"], g_cos_lower(lt, a["r_lo"], w_hi, a["c_lo"]), tag="g_cos")
        up, down = g_sin_candidates(lt, w_hi, w_lo, a["s_hi"], a["s_lo"], a["m_hi"], a["m_lo"])
        for c in up:
            prog.add_le(c, a["gs_hi"], tag="g_sin")
        for c in down:
            prog.add_le(a["gs_lo"], c, tag="g_sin")

        gc_hi.append(g_cos_upper(lt, a["r_hi"]))
        psi_c_hi.append(gc_hi[-1] + psi_cos_shift(lt, True))
        psi_c_lo.append(a["gc_lo"] + psi_cos_shift(lt, False))

    gq_lo: list[Lin] = []
    psi_q_hi: list[Lin] = []
    psi_q_lo: list[Lin] = []
    for k in range(n_b):
        q_hi = var(int(aux["gq_hi"][k]))
        if geom.pq_pos[k] >= 0:
            for high in (True, False):
                prog.add_le(v0[k] ** 2 + square(v_dev(k, high)), q_hi, tag="g_sq")
            low = Lin(const=v0[k] ** 2)
            psi_q_hi.append(q_hi + 2.0 * v0[k] * v_dev(k, True))
            psi_q_lo.append(low + 2.0 * v0[k] * v_dev(k, False))
        else:
            vg = var(int(geom.v_ctrl_pos[k]))
            prog.add_le(square(vg), q_hi, tag="g_sq")
            low = v0[k] ** 2 + 2.0 * v0[k] * (vg - v0[k])
            psi_q_hi.append(q_hi)
            psi_q_lo.append(low)
        gq_lo.append(low)

    n = prog.n_vars
    w0 = v0[geom.f] * v0[geom.t]

    def lins(items) -> tuple[sp.csr_matrix, np.ndarray]:
        return stack_lins(items, n)

    gs_hi = [var(int(j)) for j in aux["gs_hi"]]
    gs_lo = [var(int(j)) for j in aux["gs_lo"]]
    gc_lo = [var(int(j)) for j in aux["gc_lo"]]
    gq_hi = [var(int(j)) for j in aux["gq_hi"]]
    G_hi, c_hi = lins(gc_hi + gs_hi + gq_hi)
    G_lo, c_lo = lins(gc_lo + gs_lo + gq_lo)
    psi_s_hi = [gs_hi[l] + w0[l] * (var(int(phi_hi_idx[l])) - phi0[l]) for l in range(n_l)]
    psi_s_lo = [gs_lo[l] + w0[l] * (var(int(phi_lo_idx[l])) - phi0[l]) for l in range(n_l)]
    P_hi, p_hi_c = lins(psi_c_hi + psi_s_hi + psi_q_hi)
    P_lo, p_lo_c = lins(psi_c_lo + psi_s_lo + psi_q_lo)

    # fixed-point condition: A x0 - A J^-1 tau(u) + K+ g_hi + K- g_lo <= b
    m = A.shape[0]
    x0_img = A @ base.x
    U = sp.csr_matrix((np.ones(layout.size), (np.arange(layout.size), u_idx)), shape=(layout.size, n))
    b_cols = np.concatenate([phi_hi_idx, v_hi_idx, phi_lo_idx, v_lo_idx])
    b_sign = np.concatenate([np.ones(n_l + n_pq), -np.ones(n_l + n_pq)])
    B = sp.csr_matrix((b_sign, (np.arange(m), b_cols)), shape=(m, n))
    Kp, Km = sp.csr_matrix(K_plus), sp.csr_matrix(K_minus)
    tau_u = AJinv @ ops.tau_u.toarray()
    lhs = (Kp @ G_hi + Km @ G_lo - sp.csr_matrix(tau_u) @ U - B).tocsr()
    const = x0_img - AJinv @ ops.tau_c + Kp @ c_hi + Km @ c_lo
    prog.add_block(lhs, -const, tag="fixed_point")

    # intermediate variables through M_ineq: slack p, slack q, pv q
    Mp, Mm = ops.M_ineq.maximum(0).tocsr(), ops.M_ineq.minimum(0).tocsr()
    Y_hi = (Mp @ P_hi + Mm @ P_lo).tocsr()
    y_hi_c = Mp @ p_hi_c + Mm @ p_lo_c
    Y_lo = (Mp @ P_lo + Mm @ P_hi).tocsr()
    y_lo_c = Mp @ p_lo_c + Mm @ p_hi_c

    gens = net.generators
    slack_gens = list(net.slack_gens)
    p_bar_idx = prog.add_variables(
        "p_bar", len(slack_gens), [gens[g].p_min for g in slack_gens], [gens[g].p_max for g in slack_gens]
    )
    n = prog.n_vars
    Y_hi.resize((Y_hi.shape[0], n))
    Y_lo.resize((Y_lo.shape[0], n))
    P_sum = sp.csr_matrix((np.ones(len(slack_gens)), (np.zeros(len(slack_gens), dtype=int), p_bar_idx)), shape=(1, n))
    pd_slack = net.p_load[net.slack]
    prog.add_block(Y_hi[[0], :] - P_sum, [-pd_slack - y_hi_c[0]], tag="p_slack")
    p_min_slack = sum(gens[g].p_min for g in slack_gens)
    prog.add_block(-Y_lo[[0], :], [y_lo_c[0] - (p_min_slack - pd_slack)], tag="p_slack")

    q_buses = np.concatenate([[net.slack], net.pv]).astype(int)
    q_min = np.array([sum(g.q_min for g in gens if net.bus_index[g.bus] == k) for k in q_buses])
    q_max = np.array([sum(g.q_max for g in gens if net.bus_index[g.bus] == k) for k in q_buses])
    q_load = net.q_load[q_buses]
    prog.add_block(Y_hi[1:, :], q_max - q_load - y_hi_c[1:], tag="q_gen")
    prog.add_block(-Y_lo[1:, :], y_lo_c[1:] - (q_min - q_load), tag="q_gen")

    # line flows: |L psi| bounded by s_bar on both ends, then the rating cone
    limited = np.array([br.s_max is not None for br in net.branches], dtype=bool)
    lines = np.flatnonzero(limited)
    s_max = np.array([br.s_max or 0.0 for br in net.branches])
    iv = intermediates(net, mats, base.x, base.u, ops)
    for which, L in (("f", ops.L_f), ("t", ops.L_t)):
        sp_idx = prog.add_variables(f"s{which}_p", lines.size, 0.0)
        sq_idx = prog.add_variables(f"s{which}_q", lines.size, 0.0)
        aux[f"s{which}_p"], aux[f"s{which}_q"] = sp_idx, sq_idx
        n = prog.n_vars
        if lines.size == 0:
            continue
        rows = np.concatenate([lines, n_l + lines])
        sel = np.concatenate([sp_idx, sq_idx])
        Lp, Lm = L[rows, :].maximum(0).tocsr(), L[rows, :].minimum(0).tocsr()
        F_hi = (Lp @ P_hi + Lm @ P_lo).tocsr()
        F_lo = (Lp @ P_lo + Lm @ P_hi).tocsr()
        F_hi.resize((rows.size, n))
        F_lo.resize((rows.size, n))
        S = sp.csr_matrix((np.ones(rows.size), (np.arange(rows.size), sel)), shape=(rows.size, n))
        prog.add_block(F_hi - S, -(Lp @ p_hi_c + Lm @ p_lo_c), tag=f"flow_{which}")
        prog.add_block(-F_lo - S, Lp @ p_lo_c + Lm @ p_hi_c, tag=f"flow_{which}")
        base_p = iv.sf_p if which == "f" else iv.st_p
        base_q = iv.sf_q if which == "f" else iv.st_q
        for k, l in enumerate(lines):
            prog.add_soc([var(int(sp_idx[k])), var(int(sq_idx[k]))], float(s_max[l]), tag="flow_cone")
            loading = math.hypot(base_p[l], base_q[l]) / s_max[l] if s_max[l] > 0 else math.inf
            if s_max[l] < CONE_RATING_MIN or loading > CONE_LOADING_WARN:
                br = net.branches[l]
                msg = f"ill-conditioned flow cone on line {br.from_bus}-{br.to_bus} ({which} end, loading {loading:.4f})"
                logger.warning(msg)
                diagnostics.append(msg)

    prob = RestrictionProblem(
        net=net,
        mats=mats,
        ops=ops,
        base=base,
        geom=geom,
        K=sp.csr_matrix(K),
        K_plus=Kp,
        K_minus=Km,
        AJinv=AJinv,
        program=prog,
        u_idx=u_idx,
        phi_hi_idx=phi_hi_idx,
        phi_lo_idx=phi_lo_idx,
        v_hi_idx=v_hi_idx,
        v_lo_idx=v_lo_idx,
        aux=aux,
        limited=limited,
        p_bar_idx=p_bar_idx,
        coeffs=coeffs,
        diagnostics=diagnostics,
    )
    logger.info(
        "restriction assembled: vars=%d linear_rows=%d quadratic_rows=%d (bound %d)",
        prog.n_vars,
        prog.n_linear_rows,
        prog.n_quadratic_rows,
        prob.row_bound,
    )
    return prob


def _check_monotone(net: Network, gens: list[int]) -> None:
    for g in gens:
        gen = net.generators[g]
        c2, c1, _ = gen.cost
        slope_lo = 2.0 * c2 * gen.p_min + c1
        if slope_lo < -1e-12:
            raise ConfigurationError(
                f"cost of generator {g + 1} decreases on [{gen.p_min:g}, {gen.p_max:g}] p.u.; "
                "the cost over-estimate needs non-decreasing costs"
            )


def objective_cost(prob: RestrictionProblem) -> Quad:
    """Generation cost with the slack output replaced by its over-estimate ``p_bar``."""
    net = prob.net
    layout = net.controls
    gens = list(layout.p_gens) + list(net.slack_gens)
    _check_monotone(net, gens)
    terms = [(g, int(prob.u_idx[layout.sl_p][k])) for k, g in enumerate(layout.p_gens)]
    terms += [(g, int(j)) for g, j in zip(net.slack_gens, prob.p_bar_idx)]
    expr = Quad()
    for g, j in terms:
        c2, c1, c0 = net.generators[g].cost
        p = Lin.var(j)
        expr = expr + c2 * square(p) + c1 * p + c0
    return expr


def objective_distance(prob: RestrictionProblem, target: np.ndarray, lam: float = 1.0) -> Quad:
    """``lam * ||p - p*||^2 + ||v - v*||^2``; dispatchable reactive controls are weighted like ``p``."""
    layout = prob.net.controls
    target = np.asarray(target, dtype=float)
    if target.shape != (layout.size,):
        raise ConfigurationError(f"target has {target.size} entries, the control vector has {layout.size}")
    if not lam > 0:
        raise ConfigurationError(f"lambda must be positive, got {lam}")
    weights = np.ones(layout.size)
    weights[layout.sl_p] = lam
    weights[layout.sl_q] = lam
    expr = Quad()
    for k, j in enumerate(prob.u_idx):
        expr = expr + weights[k] * square(Lin.var(int(j)) - target[k])
    return expr
