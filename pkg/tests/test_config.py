import json

import pytest

from app.config import load_run_settings, settings
from app.grid.errors import ConfigurationError


def test_defaults(monkeypatch):
    monkeypatch.setattr(settings, "FEASPATH_SOLVER_SETTINGS", "")
    cfg = load_run_settings()
    assert cfg.objective == "cost"
    assert cfg.epsilon == 0.01
    assert cfg.solver.solver == "CLARABEL"
    assert cfg.samples_per_segment == 11


def test_layering(monkeypatch, tmp_path):
    env_file = tmp_path / "solver.json"
    env_file.write_text(json.dumps({"gap_tol": 1e-7, "time_limit": 10}))
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"epsilon": 0.05, "solver": {"time_limit": 20}}))
    monkeypatch.setattr(settings, "FEASPATH_SOLVER_SETTINGS", str(env_file))

    cfg = load_run_settings(cfg_file, {"epsilon": 0.001, "lam": None})
    assert cfg.epsilon == 0.001
    assert cfg.lam == 1.0
    assert cfg.solver.time_limit == 20
    assert cfg.solver.gap_tol == 1e-7


@pytest.mark.parametrize(
    "overrides",
    [{"objective": "speed"}, {"epsilon": 0}, {"max_iterations": 0}, {"unknown": 1}, {"solver": {"gap_tol": -1}}],
)
def test_invalid_values(monkeypatch, overrides):
    monkeypatch.setattr(settings, "FEASPATH_SOLVER_SETTINGS", "")
    with pytest.raises(ConfigurationError):
        load_run_settings(overrides=overrides)


def test_unreadable_file(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, "FEASPATH_SOLVER_SETTINGS", "")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigurationError, match="JSON object"):
        load_run_settings(bad)
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_run_settings(tmp_path / "missing.json")
