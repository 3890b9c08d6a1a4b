"""Envelope soundness and the bounds of the residual over a state box."""

import logging
import math

import numpy as np
import pytest

from app.grid.envelopes import (
    PolytopeBounds,
    bilinear_envelope,
    bound_g_over_polytope,
    bound_psi_over_polytope,
    build_geometry,
    sine_coefficient,
    trig_envelopes,
)
from app.grid.matrices import build_admittances, build_incidence
from app.grid.powerflow import solve_pf

TOL = 1e-9


class TestBilinear:
    def test_tight_at_base(self):
        env = bilinear_envelope(0.7, -1.3)
        assert env.over(0.7, -1.3) == pytest.approx(0.7 * -1.3)
        assert env.under(0.7, -1.3) == pytest.approx(0.7 * -1.3)

    def test_over_tight_along_equal_steps(self):
        x0, y0 = 1.1, 0.9
        env = bilinear_envelope(x0, y0)
        assert env.over(x0 + 1, y0 + 1) == pytest.approx(x0 * y0 + x0 + y0 + 1)

    def test_under_tight_along_opposite_steps(self):
        x0, y0 = 1.1, 0.9
        env = bilinear_envelope(x0, y0)
        assert env.under(x0 + 1, y0 - 1) == pytest.approx((x0 + 1) * (y0 - 1))

    def test_sandwich(self, rng):
        for _ in range(100):
            x0, y0 = rng.uniform(-2, 2, 2)
            env = bilinear_envelope(x0, y0)
            x, y = rng.uniform(-3, 3, (2, 100))
            assert np.all(env.under(x, y) <= x * y + TOL)
            assert np.all(env.over(x, y) >= x * y - TOL)


class TestTrig:
    def test_sine_coefficient(self):
        assert sine_coefficient(math.pi / 3) == pytest.approx(-0.16521, abs=1e-4)
        assert sine_coefficient(0.0) == 0.0

    def test_sine_under_value(self):
        sin_env, _ = trig_envelopes(-math.pi / 3, math.pi / 3)
        assert sin_env.under(math.pi / 6) == pytest.approx(0.4783, abs=1e-4)
        assert sin_env.under(math.pi / 6) <= 0.5

    def test_cosine_bounds(self):
        _, cos_env = trig_envelopes(-math.pi / 2, math.pi / 2)
        assert cos_env.under(0.0) == cos_env.over(0.0) == 1.0
        assert cos_env.under(math.pi / 2) == pytest.approx(1 - math.pi**2 / 8)
        assert cos_env.under(math.pi / 2) == pytest.approx(-0.2337, abs=1e-4)

    def test_degenerate_box_is_linear(self, caplog):
        with caplog.at_level(logging.WARNING, logger="app.grid.envelopes"):
            sin_env, _ = trig_envelopes(-0.5, 0.0)
        assert sin_env.under(0.3) == pytest.approx(0.3)
        assert any(r.levelno == logging.WARNING and "degenerate angle box" in r.getMessage() for r in caplog.records)

    @pytest.mark.parametrize("box", [(0.1, 0.5), (-0.5, -0.1), (-4.0, 0.5)])
    def test_bad_boxes(self, box):
        with pytest.raises(ValueError):
            trig_envelopes(*box)

    def test_sandwich(self, rng):
        for _ in range(100):
            lo, hi = -rng.uniform(0, math.pi), rng.uniform(0, math.pi)
            sin_env, cos_env = trig_envelopes(lo, hi)
            phi = rng.uniform(lo, hi, 100)
            assert np.all(sin_env.under(phi) <= np.sin(phi) + TOL)
            assert np.all(sin_env.over(phi) >= np.sin(phi) - TOL)
            assert np.all(cos_env.under(phi) <= np.cos(phi) + TOL)
            assert np.all(np.cos(phi) <= cos_env.over(phi) + TOL)


def _solved_base(net):
    inc = build_incidence(net)
    op = solve_pf(net, build_admittances(net, inc=inc), net.file_dispatch())
    return op, inc.E.T @ op.theta


def _true_residual(net, geom, v0, phi0, v, phi):
    """Exact ``g = psi - J_psi0 (x - x0)`` per line and bus."""
    f, t = geom.f, geom.t
    dv = np.where(geom.pq_pos >= 0, v - v0, 0.0)
    vv = v[f] * v[t]
    dphi = phi - phi0
    gc = vv * np.cos(dphi) - v0[t] * dv[f] - v0[f] * dv[t]
    gs = vv * np.sin(dphi) - v0[f] * v0[t] * dphi
    gq = v**2 - 2.0 * v0 * dv
    return gc, gs, gq


def _true_psi(geom, v, phi, phi0):
    vv = v[geom.f] * v[geom.t]
    return vv * np.cos(phi - phi0), vv * np.sin(phi - phi0), v**2


def _random_box(net, rng, v0, phi0, width=0.15):
    n_l, pq = net.n_line, net.pq
    lo = np.array([br.angle_min for br in net.branches])
    hi = np.array([br.angle_max for br in net.branches])
    return PolytopeBounds(
        phi_hi=np.minimum(phi0 + rng.uniform(0, width, n_l), hi),
        phi_lo=np.maximum(phi0 - rng.uniform(0, width, n_l), lo),
        v_hi=v0[pq] + rng.uniform(0, 0.05, len(pq)),
        v_lo=v0[pq] - rng.uniform(0, 0.05, len(pq)),
    )


def _random_u(net, rng, base_u):
    u = base_u.copy()
    sl = net.controls.sl_v
    u[sl] = u[sl] + rng.uniform(-0.02, 0.02, net.controls.n_v)
    return u


def _sample_state(net, geom, rng, u, bounds, v0, n):
    v = np.tile(v0, (n, 1))
    ctrl = geom.v_ctrl_pos >= 0
    v[:, ctrl] = u[geom.v_ctrl_pos[ctrl]]
    v[:, net.pq] = rng.uniform(bounds.v_lo, bounds.v_hi, (n, len(net.pq)))
    # line angles are sampled per line; the residual of one line only sees its own angle
    phi = rng.uniform(bounds.phi_lo, bounds.phi_hi, (n, net.n_line))
    return v, phi


@pytest.mark.parametrize("case_fixture", ["three_bus", "case5", "case9"])
def test_residual_bounds_contain_samples(request, rng, case_fixture):
    net = request.getfixturevalue(case_fixture)
    geom = build_geometry(net)
    op, phi0 = _solved_base(net)
    v0 = op.v
    for _ in range(20):
        u = _random_u(net, rng, op.u)
        bounds = _random_box(net, rng, v0, phi0)
        g = bound_g_over_polytope(net, geom, v0, phi0, u, bounds)
        psi = bound_psi_over_polytope(net, geom, v0, phi0, u, bounds)
        v, phi = _sample_state(net, geom, rng, u, bounds, v0, 200)
        for k in range(v.shape[0]):
            gc, gs, gq = _true_residual(net, geom, v0, phi0, v[k], phi[k])
            assert np.all(gc <= g.C_hi + TOL) and np.all(gc >= g.C_lo - TOL)
            assert np.all(gs <= g.S_hi + TOL) and np.all(gs >= g.S_lo - TOL)
            assert np.all(gq <= g.Q_hi + TOL) and np.all(gq >= g.Q_lo - TOL)
            pc, ps, pq_ = _true_psi(geom, v[k], phi[k], phi0)
            assert np.all(pc <= psi.C_hi + TOL) and np.all(pc >= psi.C_lo - TOL)
            assert np.all(ps <= psi.S_hi + TOL) and np.all(ps >= psi.S_lo - TOL)
            assert np.all(pq_ <= psi.Q_hi + TOL) and np.all(pq_ >= psi.Q_lo - TOL)


def test_zero_width_box_collapses_to_base(case9):
    net = case9
    geom = build_geometry(net)
    op, phi0 = _solved_base(net)
    v0 = op.v
    bounds = PolytopeBounds.at_base(phi0, v0[net.pq])
    g = bound_g_over_polytope(net, geom, v0, phi0, op.u, bounds)
    gc, gs, gq = _true_residual(net, geom, v0, phi0, v0, phi0)
    np.testing.assert_allclose(g.upper, g.lower, atol=1e-12)
    np.testing.assert_allclose(g.upper, np.concatenate([gc, gs, gq]), atol=1e-12)
    psi = bound_psi_over_polytope(net, geom, v0, phi0, op.u, bounds)
    np.testing.assert_allclose(psi.upper, np.concatenate(_true_psi(geom, v0, phi0, phi0)), atol=1e-12)


def test_vertex_counts(case9, two_bus):
    geom = build_geometry(case9)
    counts = {(br.from_bus, br.to_bus): geom.vertex_count(k) for k, br in enumerate(case9.branches)}
    # generator buses 1, 2 and 3 only connect to PQ buses; 4-5 joins two PQ buses
    assert counts[(1, 4)] == 4
    assert counts[(4, 5)] == 8
    assert build_geometry(two_bus).vertex_count(0) == 4


def test_pv_to_pv_line_has_two_vertices(case5):
    geom = build_geometry(case5)
    k = next(k for k, br in enumerate(case5.branches) if (br.from_bus, br.to_bus) == (1, 5))
    assert geom.vertex_count(k) == 2


def test_bound_vector_layout(case9):
    n_l, n_pq = case9.n_line, len(case9.pq)
    b = np.arange(2 * (n_l + n_pq), dtype=float)
    bounds = PolytopeBounds.from_vector(b, n_l, n_pq)
    np.testing.assert_array_equal(bounds.to_vector(), b)
    with pytest.raises(ValueError):
        PolytopeBounds.from_vector(b[:-1], n_l, n_pq)
