import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from app.grid.case_io import Network

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IncidenceSet:
    E_f: sp.csr_matrix
    E_t: sp.csr_matrix
    E: sp.csr_matrix
    E_ns: sp.csr_matrix
    C: sp.csr_matrix


@dataclass(frozen=True)
class AdmittanceSet:
    """Per-line admittances (stored as the diagonals) and the phase-adjusted bus x line blocks.

    ``G_c + jB_c = E_f Y_ft_hat + E_t Y_tf_hat`` and ``G_s + jB_s = E_f Y_ft_hat - E_t Y_tf_hat``;
    ``G_d + jB_d`` is the diagonal-like part built from the self admittances and shunts.
    """

    Y_ff: np.ndarray
    Y_tt: np.ndarray
    Y_ft: np.ndarray
    Y_tf: np.ndarray
    Y_sh: np.ndarray
    Y_ft_hat: np.ndarray
    Y_tf_hat: np.ndarray
    G_c: sp.csr_matrix
    B_c: sp.csr_matrix
    G_s: sp.csr_matrix
    B_s: sp.csr_matrix
    G_d: sp.csr_matrix
    B_d: sp.csr_matrix
    phi0: np.ndarray
    inc: IncidenceSet

    def y_bus(self) -> sp.csr_matrix:
        E_f, E_t = self.inc.E_f, self.inc.E_t
        return (
            E_f @ sp.diags(self.Y_ff) @ E_f.T
            + E_f @ sp.diags(self.Y_ft) @ E_t.T
            + E_t @ sp.diags(self.Y_tf) @ E_f.T
            + E_t @ sp.diags(self.Y_tt) @ E_t.T
            + sp.diags(self.Y_sh)
        ).tocsr()


def build_incidence(net: Network) -> IncidenceSet:
    n_b, n_l, n_g = net.n_bus, net.n_line, net.n_gen
    lines = np.arange(n_l)
    f = np.array([net.bus_index[br.from_bus] for br in net.branches], dtype=int)
    t = np.array([net.bus_index[br.to_bus] for br in net.branches], dtype=int)
    E_f = sp.csr_matrix((np.ones(n_l), (f, lines)), shape=(n_b, n_l))
    E_t = sp.csr_matrix((np.ones(n_l), (t, lines)), shape=(n_b, n_l))
    E = (E_f - E_t).tocsr()
    C = sp.csr_matrix((np.ones(n_g), (net.gen_bus, np.arange(n_g))), shape=(n_b, n_g))
    return IncidenceSet(E_f=E_f, E_t=E_t, E=E, E_ns=E[net.non_slack, :].tocsr(), C=C)


def build_admittances(net: Network, phi0: Optional[np.ndarray] = None, inc: Optional[IncidenceSet] = None) -> AdmittanceSet:
    inc = inc or build_incidence(net)
    n_l = net.n_line
    phi0 = np.zeros(n_l) if phi0 is None else np.asarray(phi0, dtype=float)
    if phi0.shape != (n_l,):
        raise ValueError(f"phi0 must have length {n_l}, got {phi0.shape}")

    y = np.array([br.y for br in net.branches], dtype=complex)
    b_c = np.array([br.b_c for br in net.branches])
    tap = np.array([br.tap * np.exp(1j * br.shift) for br in net.branches], dtype=complex)

    Y_tt = y + 1j * b_c / 2
    Y_ff = Y_tt / (tap * np.conj(tap))
    Y_ft = -y / np.conj(tap)
    Y_tf = -y / tap
    Y_sh = np.array([bus.shunt_g + 1j * bus.shunt_b for bus in net.buses], dtype=complex)

    Y_ft_hat = Y_ft * np.exp(-1j * phi0)
    Y_tf_hat = Y_tf * np.exp(1j * phi0)

    E_f, E_t = inc.E_f, inc.E_t
    Yc = E_f @ sp.diags(Y_ft_hat) + E_t @ sp.diags(Y_tf_hat)
    Ys = E_f @ sp.diags(Y_ft_hat) - E_t @ sp.diags(Y_tf_hat)
    Yd = E_f @ sp.diags(Y_ff) @ E_f.T + E_t @ sp.diags(Y_tt) @ E_t.T + sp.diags(Y_sh)

    return AdmittanceSet(
        Y_ff=Y_ff,
        Y_tt=Y_tt,
        Y_ft=Y_ft,
        Y_tf=Y_tf,
        Y_sh=Y_sh,
        Y_ft_hat=Y_ft_hat,
        Y_tf_hat=Y_tf_hat,
        G_c=sp.csr_matrix(Yc.real),
        B_c=sp.csr_matrix(Yc.imag),
        G_s=sp.csr_matrix(Ys.real),
        B_s=sp.csr_matrix(Ys.imag),
        G_d=sp.csr_matrix(Yd.real),
        B_d=sp.csr_matrix(Yd.imag),
        phi0=phi0,
        inc=inc,
    )
