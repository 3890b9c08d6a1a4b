"""Incidence and phase-adjusted admittance construction."""

import numpy as np
import pytest

from app.grid.case_io import parse_case
from app.grid.matrices import build_admittances, build_incidence
from app.grid.powerflow import basis, operators, state_size


def _complex_injection(net, mats, theta, v):
    V = v * np.exp(1j * theta)
    return V * np.conj(mats.y_bus() @ V)


def _random_state(net, rng):
    n_ns = len(net.non_slack)
    x = np.concatenate([rng.uniform(-0.5, 0.5, n_ns), rng.uniform(0.9, 1.1, len(net.pq))])
    u = net.file_dispatch()
    u[net.controls.sl_v] = rng.uniform(0.9, 1.1, net.controls.n_v)
    return x, u


def test_two_bus_incidence(two_bus):
    inc = build_incidence(two_bus)
    assert inc.E.toarray().tolist() == [[1.0], [-1.0]]
    assert inc.C.toarray().tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_two_bus_line_admittance(two_bus):
    mats = build_admittances(two_bus)
    assert mats.Y_ft[0] == pytest.approx(1j)
    assert mats.Y_ff[0] == pytest.approx(-1j)


def test_tap_ratio_formulas():
    text = (
        "mpc.baseMVA = 100;\n"
        "mpc.bus = [1 3 0 0 0 0 1 1 0 100 1 1.1 0.9; 2 1 0 0 0 0 1 1 0 100 1 1.1 0.9];\n"
        "mpc.gen = [1 0 0 10 -10 1 100 1 10 0];\n"
        "mpc.branch = [1 2 1 0 0 0 0 0 2 0 1 -360 360];\n"
    )
    net = parse_case(text)
    mats = build_admittances(net)
    assert mats.Y_ff[0] == pytest.approx(0.25)
    assert mats.Y_tt[0] == pytest.approx(1.0)
    assert mats.Y_ft[0] == pytest.approx(-0.5)
    assert mats.Y_tf[0] == pytest.approx(-0.5)


@pytest.mark.parametrize("case_fixture", ["two_bus", "three_bus", "case5", "case9"])
@pytest.mark.parametrize("phased", [False, True])
def test_basis_injections_match_complex_power(request, rng, case_fixture, phased):
    net = request.getfixturevalue(case_fixture)
    inc = build_incidence(net)
    for _ in range(100):
        x, u = _random_state(net, rng)
        phi0 = rng.uniform(-0.3, 0.3, net.n_line) if phased else None
        mats = build_admittances(net, phi0=phi0, inc=inc)
        ops = operators(net, mats)
        theta = np.zeros(net.n_bus)
        theta[net.non_slack] = x[: len(net.non_slack)]
        v = np.zeros(net.n_bus)
        v[net.pq] = x[len(net.non_slack) :]
        v[net.controls.v_buses] = u[net.controls.sl_v]
        psi = basis(net, mats, x, u).vector
        s = _complex_injection(net, mats, theta, v)
        np.testing.assert_allclose(ops.P @ psi, s.real, atol=1e-10)
        np.testing.assert_allclose(ops.Q @ psi, s.imag, atol=1e-10)


def test_phi0_length_checked(case9):
    with pytest.raises(ValueError):
        build_admittances(case9, phi0=np.zeros(3))


def test_state_size(case9):
    assert state_size(case9) == 8 + 6
