import numpy as np
import pytest

from app.config import RunSettings
from app.grid.errors import InfeasibleStartError
from app.grid.matrices import build_admittances
from app.grid.powerflow import evaluate_setpoint, generation_cost
from app.grid.start import dc_dispatch, dc_dispatch_powers, uniform_cost_network, uniform_cost_start


def _total_mw(net, u):
    """Total generation of the solved point, read as its cost under uniform pricing."""
    mats = build_admittances(net)
    op, report = evaluate_setpoint(net, mats, u)
    assert report.feasible, report.violations()
    return generation_cost(uniform_cost_network(net), mats, op)


class TestDcDispatch:
    @pytest.mark.parametrize("case_fixture", ["three_bus", "case5", "case9"])
    def test_powers_balance_the_load(self, request, case_fixture):
        net = request.getfixturevalue(case_fixture)
        pg = dc_dispatch_powers(net)
        assert pg.shape == (net.n_gen,)
        assert pg.sum() == pytest.approx(net.p_load.sum(), rel=1e-6)
        lo = np.array([g.p_min for g in net.generators])
        hi = np.array([g.p_max for g in net.generators])
        assert np.all(pg >= lo - 1e-9) and np.all(pg <= hi + 1e-9)

    def test_slack_keeps_loss_headroom(self, case5):
        pg = dc_dispatch_powers(case5, loss_margin=0.05)
        slack_max = sum(case5.generators[g].p_max for g in case5.slack_gens)
        assert pg[case5.slack_gens].sum() <= slack_max - 0.05 * case5.p_load.sum() + 1e-6

    @pytest.mark.parametrize("case_fixture", ["three_bus", "case5", "case9"])
    def test_start_is_ac_feasible(self, request, case_fixture):
        net = request.getfixturevalue(case_fixture)
        u = dc_dispatch(net)
        _, report = evaluate_setpoint(net, build_admittances(net), u)
        assert report.feasible, report.violations()

    def test_case5_file_dispatch_needs_a_start(self, case5):
        _, report = evaluate_setpoint(case5, build_admittances(case5), case5.file_dispatch())
        assert not report.feasible
        assert "p_gen" in report.violations()

    @pytest.mark.parametrize(("derate", "margin"), [(0.0, 0.05), (1.5, 0.05), (0.9, -0.1)])
    def test_bad_arguments(self, case9, derate, margin):
        with pytest.raises(ValueError):
            dc_dispatch_powers(case9, derate=derate, loss_margin=margin)

    def test_unreachable_headroom(self, case9):
        with pytest.raises(InfeasibleStartError):
            dc_dispatch_powers(case9, loss_margin=10.0)


class TestUniformCost:
    def test_network_prices_every_megawatt_alike(self, case5):
        net = uniform_cost_network(case5)
        assert all(g.cost == (0.0, case5.base_mva, 0.0) for g in net.generators)
        assert net.buses == case5.buses
        assert case5.generators[0].cost != net.generators[0].cost

    def test_start_lowers_total_mw(self, case9):
        start = dc_dispatch(case9)
        u = uniform_cost_start(case9, start, RunSettings(max_iterations=10))
        assert u.shape == start.shape
        assert _total_mw(case9, u) <= _total_mw(case9, start) + 1e-6
