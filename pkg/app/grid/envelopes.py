"""Concave envelopes of the bilinear and trigonometric parts of the basis functions and their extremes over the state box.

The same candidate formulas serve two callers: the restriction assembly feeds affine expressions and turns every
candidate into one convex row, the numeric evaluators feed arrays and reduce with max / min.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import scipy.sparse as sp

from app.grid.case_io import Network
from app.grid.conic import square
from app.grid.matrices import IncidenceSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvelopePair:
    over: Callable[..., Any]
    under: Callable[..., Any]
    domain: Optional[tuple[float, float]] = None


def bilinear_envelope(x0: float, y0: float) -> EnvelopePair:
    """Convex over / concave under estimators of ``x * y`` touching it at ``(x0, y0)``."""

    def over(x, y):
        return 0.25 * square((x - x0) + (y - y0)) + x0 * y + x * y0 - x0 * y0

    def under(x, y):
        return -0.25 * square((x - x0) - (y - y0)) + x0 * y + x * y0 - x0 * y0

    return EnvelopePair(over=over, under=under)


def sine_coefficient(edge):
    """``(sin a - a) / a^2``, 0 at ``a = 0``."""
    a = np.asarray(edge, dtype=float)
    safe = np.where(a == 0.0, 1.0, a)
    k = np.where(a == 0.0, 0.0, (np.sin(safe) - safe) / safe**2)
    return float(k) if k.ndim == 0 else k


def trig_envelopes(phi_lo: float, phi_hi: float) -> tuple[EnvelopePair, EnvelopePair]:
    """Envelopes of ``sin`` and ``cos`` of the shifted angle on ``[phi_lo, phi_hi]``."""
    if phi_lo > 0.0 or phi_hi < 0.0:
        raise ValueError(f"angle box [{phi_lo}, {phi_hi}] must contain the base angle 0")
    if max(-phi_lo, phi_hi) > math.pi + 1e-12:
        raise ValueError("shifted angle bounds must not exceed pi in magnitude")
    if phi_hi == 0.0 or phi_lo == 0.0:
        logger.warning("degenerate angle box [%g, %g], using the linear sine limit", phi_lo, phi_hi)
    k_under = sine_coefficient(phi_hi)
    k_over = sine_coefficient(phi_lo)
    box = (phi_lo, phi_hi)
    sin_pair = EnvelopePair(
        over=lambda phi: phi + k_over * square(phi),
        under=lambda phi: phi + k_under * square(phi),
        domain=box,
    )
    cos_pair = EnvelopePair(over=lambda phi: 1.0, under=lambda phi: 1.0 - 0.5 * square(phi), domain=box)
    return sin_pair, cos_pair


@dataclass(frozen=True)
class LineGeometry:
    """Endpoint classification of every line; the vertex set of a line spans only the free coordinates."""

    f: np.ndarray
    t: np.ndarray
    f_pq: np.ndarray
    t_pq: np.ndarray
    pq_pos: np.ndarray
    v_ctrl_pos: np.ndarray

    def vertex_count(self, line: int) -> int:
        return 2 * (2 if self.f_pq[line] else 1) * (2 if self.t_pq[line] else 1)


def build_geometry(net: Network) -> LineGeometry:
    f = np.array([net.bus_index[br.from_bus] for br in net.branches], dtype=int)
    t = np.array([net.bus_index[br.to_bus] for br in net.branches], dtype=int)
    pq_pos = np.full(net.n_bus, -1, dtype=int)
    pq_pos[net.pq] = np.arange(len(net.pq))
    v_ctrl_pos = np.full(net.n_bus, -1, dtype=int)
    v_ctrl_pos[net.controls.v_buses] = net.controls.sl_v.start + np.arange(net.controls.n_v)
    return LineGeometry(f=f, t=t, f_pq=pq_pos[f] >= 0, t_pq=pq_pos[t] >= 0, pq_pos=pq_pos, v_ctrl_pos=v_ctrl_pos)


@dataclass
class PolytopeBounds:
    """Upper and lower line angles and PQ voltages, ``b = [phi_hi, v_hi, -phi_lo, -v_lo]``."""

    phi_hi: np.ndarray
    phi_lo: np.ndarray
    v_hi: np.ndarray
    v_lo: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.phi_hi, self.v_hi, -self.phi_lo, -self.v_lo])

    @classmethod
    def from_vector(cls, b: np.ndarray, n_line: int, n_pq: int) -> "PolytopeBounds":
        b = np.asarray(b, dtype=float)
        if b.shape != (2 * (n_line + n_pq),):
            raise ValueError(f"bound vector must have length {2 * (n_line + n_pq)}, got {b.shape}")
        k = n_line + n_pq
        return cls(phi_hi=b[:n_line], v_hi=b[n_line:k], phi_lo=-b[k : k + n_line], v_lo=-b[k + n_line :])

    @classmethod
    def at_base(cls, phi0: np.ndarray, v0_pq: np.ndarray) -> "PolytopeBounds":
        return cls(phi_hi=phi0.copy(), phi_lo=phi0.copy(), v_hi=v0_pq.copy(), v_lo=v0_pq.copy())

    def contains(self, phi: np.ndarray, v_pq: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(
            np.all(phi <= self.phi_hi + tol)
            and np.all(phi >= self.phi_lo - tol)
            and np.all(v_pq <= self.v_hi + tol)
            and np.all(v_pq >= self.v_lo - tol)
        )


def bound_limits(net: Network) -> PolytopeBounds:
    """Largest admissible box: line angle limits and PQ voltage limits."""
    return PolytopeBounds(
        phi_hi=np.array([br.angle_max for br in net.branches]),
        phi_lo=np.array([br.angle_min for br in net.branches]),
        v_hi=net.v_max[net.pq].copy(),
        v_lo=net.v_min[net.pq].copy(),
    )


def polytope_matrix(net: Network, inc: IncidenceSet) -> sp.csr_matrix:
    """``A`` with ``A x <= b`` describing the box in terms of ``x = (theta_ns, v_pq)``."""
    n_pq = len(net.pq)
    phi = inc.E_ns.T.tocsr()
    if n_pq == 0:
        top = phi
    else:
        top = sp.bmat([[phi, None], [None, sp.identity(n_pq, format="csr")]], format="csr")
    return sp.vstack([top, -top]).tocsr()


def angle_coefficients(phi0: np.ndarray, phi_min: np.ndarray, phi_max: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sine envelope curvatures ``(k_under, k_over)`` over the clipped outer angle box."""
    hi = np.minimum(phi_max, phi0 + math.pi) - phi0
    lo = np.maximum(phi_min, phi0 - math.pi) - phi0
    return sine_coefficient(np.maximum(hi, 0.0)), sine_coefficient(np.minimum(lo, 0.0))


@dataclass
class LineTerms:
    """Per-line inputs to the candidate formulas; entries are floats, arrays or affine expressions.

    ``df_*``/``dt_*`` are voltage deviations from the base at the endpoints, ``ph_*`` are shifted angle corners.
    A fixed endpoint has equal low and high deviation.
    """

    df_lo: Any
    df_hi: Any
    dt_lo: Any
    dt_hi: Any
    ph_lo: Any
    ph_hi: Any
    v0f: Any
    v0t: Any
    f_pq: Any
    t_pq: Any
    k_under: Any
    k_over: Any
    f_fixed: bool = False
    t_fixed: bool = False

    @property
    def w0(self):
        return self.v0f * self.v0t

    def f_corners(self) -> list:
        return [self.df_hi] if self.f_fixed else [self.df_lo, self.df_hi]

    def t_corners(self) -> list:
        return [self.dt_hi] if self.t_fixed else [self.dt_lo, self.dt_hi]

    def phi_corners(self) -> list:
        return [self.ph_lo, self.ph_hi]


def _unless(flag, value):
    if isinstance(flag, np.ndarray):
        return np.where(flag, 0.0, value)
    return 0.0 if flag else value


def _only(flag, value):
    if isinstance(flag, np.ndarray):
        return np.where(flag, value, 0.0)
    return value if flag else 0.0


# upper candidates: aux >= each; lower candidates: aux <= each


def product_candidates(lt: LineTerms) -> tuple[list, list]:
    upper = [0.25 * square(a + b) for a in lt.f_corners() for b in lt.t_corners()]
    lower = [-0.25 * square(a - b) for a in lt.f_corners() for b in lt.t_corners()]
    return upper, lower


def sine_candidates(lt: LineTerms) -> tuple[list, list]:
    upper = [p + lt.k_over * square(p) for p in lt.phi_corners()]
    lower = [p + lt.k_under * square(p) for p in lt.phi_corners()]
    return upper, lower


def cosine_candidates(lt: LineTerms) -> list:
    return [-0.5 * square(p) for p in lt.phi_corners()]


def sine_residual_candidates(lt: LineTerms) -> tuple[list, list]:
    upper = [lt.w0 * lt.k_over * square(p) for p in lt.phi_corners()]
    lower = [lt.w0 * lt.k_under * square(p) for p in lt.phi_corners()]
    return upper, lower


def product_range(lt: LineTerms, r_hi, r_lo) -> tuple[Any, Any]:
    w0 = lt.w0
    w_hi = w0 + lt.v0f * lt.dt_hi + lt.v0t * lt.df_hi + r_hi
    w_lo = w0 + lt.v0f * lt.dt_lo + lt.v0t * lt.df_lo + r_lo
    return w_hi, w_lo


def cosine_base(lt: LineTerms):
    """Part of ``v_f v_t`` that survives subtracting the state Jacobian term."""
    return lt.w0 + lt.v0f * _unless(lt.t_pq, lt.dt_hi) + lt.v0t * _unless(lt.f_pq, lt.df_hi)


def g_cos_upper(lt: LineTerms, r_hi):
    return cosine_base(lt) + r_hi


def g_cos_lower(lt: LineTerms, r_lo, w_hi, c_lo):
    w0 = lt.w0
    return -0.25 * square(w_hi - w0 - c_lo) + w0 * c_lo + cosine_base(lt) + r_lo


def g_sin_candidates(lt: LineTerms, w_hi, w_lo, s_hi, s_lo, m_hi, m_lo) -> tuple[list, list]:
    w0 = lt.w0
    upper = [0.25 * square(w - w0 + s) + m_hi for w in (w_lo, w_hi) for s in (s_lo, s_hi)]
    lower = [-0.25 * square(w - w0 - s) + m_lo for w in (w_lo, w_hi) for s in (s_lo, s_hi)]
    return upper, lower


def psi_cos_shift(lt: LineTerms, use_high: bool):
    """Extreme of the state Jacobian term ``v0_t dv_f + v0_f dv_t`` over PQ endpoints."""
    df = lt.df_hi if use_high else lt.df_lo
    dt = lt.dt_hi if use_high else lt.dt_lo
    return lt.v0t * _only(lt.f_pq, df) + lt.v0f * _only(lt.t_pq, dt)


@dataclass
class BasisBounds:
    C_hi: np.ndarray
    C_lo: np.ndarray
    S_hi: np.ndarray
    S_lo: np.ndarray
    Q_hi: np.ndarray
    Q_lo: np.ndarray

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.C_hi, self.S_hi, self.Q_hi])

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.C_lo, self.S_lo, self.Q_lo])


def line_terms(
    net: Network,
    geom: LineGeometry,
    v0: np.ndarray,
    phi0: np.ndarray,
    u: np.ndarray,
    bounds: PolytopeBounds,
    coeffs: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> LineTerms:
    """Vectorized line inputs for a numeric ``(u, b)``."""
    v_u = v0.copy()
    ctrl = geom.v_ctrl_pos >= 0
    v_u[ctrl] = u[geom.v_ctrl_pos[ctrl]]
    dev = v_u - v0
    vhi = v0.copy()
    vlo = v0.copy()
    vhi[net.pq] = bounds.v_hi
    vlo[net.pq] = bounds.v_lo
    d_hi = np.where(geom.pq_pos >= 0, vhi - v0, dev)
    d_lo = np.where(geom.pq_pos >= 0, vlo - v0, dev)
    if coeffs is None:
        coeffs = angle_coefficients(phi0, np.array([br.angle_min for br in net.branches]), np.array([br.angle_max for br in net.branches]))
    f, t = geom.f, geom.t
    return LineTerms(
        df_lo=d_lo[f],
        df_hi=d_hi[f],
        dt_lo=d_lo[t],
        dt_hi=d_hi[t],
        ph_lo=bounds.phi_lo - phi0,
        ph_hi=bounds.phi_hi - phi0,
        v0f=v0[f],
        v0t=v0[t],
        f_pq=geom.f_pq,
        t_pq=geom.t_pq,
        k_under=coeffs[0],
        k_over=coeffs[1],
    )


def envelope_max(cands: list) -> np.ndarray:
    return np.max(np.stack(cands), axis=0)


def envelope_min(cands: list) -> np.ndarray:
    return np.min(np.stack(cands), axis=0)


def bound_g_over_polytope(
    net: Network,
    geom: LineGeometry,
    v0: np.ndarray,
    phi0: np.ndarray,
    u: np.ndarray,
    bounds: PolytopeBounds,
    coeffs: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> BasisBounds:
    """Tightest values the restriction's auxiliary rows allow for the residual ``g = psi - J_psi0 (x - x0)``."""
    lt = line_terms(net, geom, v0, phi0, u, bounds, coeffs)
    up, down = product_candidates(lt)
    r_hi, r_lo = envelope_max(up), envelope_min(down)
    up, down = sine_candidates(lt)
    s_hi, s_lo = envelope_max(up), envelope_min(down)
    c_lo = np.minimum(envelope_min(cosine_candidates(lt)), 0.0)
    up, down = sine_residual_candidates(lt)
    m_hi, m_lo = envelope_max(up), envelope_min(down)
    w_hi, w_lo = product_range(lt, r_hi, r_lo)
    up, down = g_sin_candidates(lt, w_hi, w_lo, s_hi, s_lo, m_hi, m_lo)

    q_hi, q_lo = bus_g_bounds(net, geom, v0, u, bounds)
    return BasisBounds(
        C_hi=g_cos_upper(lt, r_hi),
        C_lo=g_cos_lower(lt, r_lo, w_hi, c_lo),
        S_hi=envelope_max(up),
        S_lo=envelope_min(down),
        Q_hi=q_hi,
        Q_lo=q_lo,
    )


def bus_g_bounds(net: Network, geom: LineGeometry, v0: np.ndarray, u: np.ndarray, bounds: PolytopeBounds) -> tuple[np.ndarray, np.ndarray]:
    q_hi = np.empty(net.n_bus)
    q_lo = np.empty(net.n_bus)
    pq = net.pq
    q_hi[pq] = v0[pq] ** 2 + np.maximum((bounds.v_hi - v0[pq]) ** 2, (bounds.v_lo - v0[pq]) ** 2)
    q_lo[pq] = v0[pq] ** 2
    other = np.flatnonzero(geom.pq_pos < 0)
    vg = u[geom.v_ctrl_pos[other]]
    q_hi[other] = vg**2
    q_lo[other] = v0[other] ** 2 + 2.0 * v0[other] * (vg - v0[other])
    return q_hi, q_lo


def bound_psi_over_polytope(
    net: Network,
    geom: LineGeometry,
    v0: np.ndarray,
    phi0: np.ndarray,
    u: np.ndarray,
    bounds: PolytopeBounds,
    coeffs: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> BasisBounds:
    """Bounds on ``psi`` itself: the residual bounds plus the extreme Jacobian term over the box."""
    g = bound_g_over_polytope(net, geom, v0, phi0, u, bounds, coeffs)
    lt = line_terms(net, geom, v0, phi0, u, bounds, coeffs)
    w0 = lt.w0
    pq = net.pq
    q_hi, q_lo = g.Q_hi.copy(), g.Q_lo.copy()
    q_hi[pq] += 2.0 * v0[pq] * (bounds.v_hi - v0[pq])
    q_lo[pq] += 2.0 * v0[pq] * (bounds.v_lo - v0[pq])
    return BasisBounds(
        C_hi=g.C_hi + psi_cos_shift(lt, True),
        C_lo=g.C_lo + psi_cos_shift(lt, False),
        S_hi=g.S_hi + w0 * lt.ph_hi,
        S_lo=g.S_lo + w0 * lt.ph_lo,
        Q_hi=q_hi,
        Q_lo=q_lo,
    )
