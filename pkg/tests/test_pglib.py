"""Cost runs on benchmark cases; set ``PGLIB_OPF_DIR`` to a pglib-opf checkout to enable.

Starts come from ``<case>.start.json`` next to the case file, else from the uniform-cost start.
"""

import os
from pathlib import Path

import pytest

from app.config import RunSettings
from app.grid.case_io import load_case
from app.grid.errors import InfeasibleStartError
from app.grid.sequential import certify_path, lambda_sweep, optimality_gap, run
from app.grid.start import uniform_cost_start
from app.schemas.path import read_dispatch

PGLIB_DIR = os.getenv("PGLIB_OPF_DIR", "")

pytestmark = pytest.mark.skipif(not PGLIB_DIR, reason="PGLIB_OPF_DIR is not set")

# reference optimum, published final cost and iteration count
REFERENCE_RUNS = [
    ("pglib_opf_case3_lmbd", 5812.64, 5813.54, 5),
    ("pglib_opf_case5_pjm", 17551.9, 17578.8, 4),
    ("pglib_opf_case30_ieee", 11974.5, 11976.8, 2),
    ("pglib_opf_case39_epri", 142980.0, 143010.0, 4),
]


def _case(name):
    case_file = Path(PGLIB_DIR) / f"{name}.m"
    if not case_file.exists():
        pytest.skip(f"{case_file} not found")
    return case_file, load_case(case_file)


def _start(case_file, net, cfg):
    start_file = case_file.with_name(f"{case_file.stem}.start.json")
    if start_file.exists():
        return read_dispatch(start_file, net)
    try:
        return uniform_cost_start(net, config=cfg)
    except InfeasibleStartError as exc:
        pytest.skip(f"no feasible start for {net.name}: {exc}")


@pytest.mark.parametrize(("name", "reference", "final", "iterations"), REFERENCE_RUNS)
def test_reference_costs(name, reference, final, iterations):
    case_file, net = _case(name)
    cfg = RunSettings()
    path = run(net, _start(case_file, net, cfg), cfg)
    assert path.final_cost == pytest.approx(final, rel=5e-3)
    assert abs(path.iterations - iterations) <= 2
    assert optimality_gap(path.costs[1], reference) <= 0.20
    tol = 1e-6 * path.initial_cost
    assert all(b <= a + tol for a, b in zip(path.costs, path.costs[1:]))
    assert certify_path(path, net).certified


@pytest.mark.parametrize("name", ["pglib_opf_case14_ieee", "pglib_opf_case24_ieee_rts"])
def test_cost_run_certifies(name):
    case_file, net = _case(name)
    cfg = RunSettings(max_iterations=3)
    path = run(net, _start(case_file, net, cfg), cfg)
    assert path.final_cost <= path.initial_cost * (1 + 1e-6)
    assert certify_path(path, net).certified


def test_lambda_sweep_separates_components():
    case_file, net = _case("pglib_opf_case39_epri")
    target_file = case_file.with_name(f"{case_file.stem}.target.json")
    if not target_file.exists():
        pytest.skip(f"{target_file} not found")
    cfg = RunSettings(max_iterations=30)
    start = _start(case_file, net, cfg)
    sweep = lambda_sweep(net, start, read_dispatch(target_file, net), (0.1, 1.0, 10.0), cfg)
    reached = [r.p_residual < 1e-2 and r.v_residual < 1e-2 for r in sweep]
    assert any(reached)
    assert not all(reached)
