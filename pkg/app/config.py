import json
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

ROOT_DIR = Path(__file__).resolve().parents[1]
load_dotenv(ROOT_DIR / ".env")


class Settings:
    DATABASE_URL: str = os.getenv("DATABASE_URL", "sqlite:///./feaspath.db")
    AUTO_CREATE_SCHEMA: bool = os.getenv("AUTO_CREATE_SCHEMA", "0") == "1"
    CORS_ORIGINS: list[str] = [
        item.strip()
        for item in os.getenv("CORS_ORIGINS", "*").split(",")
        if item.strip()
    ]
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").strip().upper()
    FEASPATH_SOLVER_SETTINGS: str = os.getenv("FEASPATH_SOLVER_SETTINGS", "").strip()


settings = Settings()


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    solver: str = "CLARABEL"
    feasibility_tol: float = Field(1e-8, gt=0)
    gap_tol: float = Field(1e-8, gt=0)
    time_limit: float = Field(300.0, gt=0)
    verbose: bool = False
    max_iter: int = Field(200, ge=1)
    coefficient_cleanup: float = Field(1e-12, ge=0)
    # a solve counts as optimal only when the recomputed row violation stays below this
    recheck_tol: float = Field(1e-7, gt=0)
    # numerical failures are retried with these, then with each installed fallback solver
    retry_cleanup: float = Field(1e-9, ge=0)
    retry_tol: float = Field(1e-10, gt=0)
    retry_max_iter: int = Field(1000, ge=1)
    fallback_solvers: list[str] = Field(default_factory=lambda: ["CVXOPT"])


class RunSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    objective: Literal["cost", "distance"] = "cost"
    lam: float = Field(1.0, gt=0)
    epsilon: float = Field(0.01, gt=0)
    max_iterations: int = Field(50, ge=1)
    samples_per_segment: int = Field(11, ge=2)
    pf_tol: float = Field(1e-8, gt=0)
    pf_max_iter: int = Field(50, ge=1)
    feasibility_tol: float = Field(1e-6, ge=0)
    # threads for certification samples and region slices
    workers: int = Field(1, ge=1)
    solver: SolverSettings = Field(default_factory=SolverSettings)


def _read_json(path: Union[str, Path]) -> dict[str, Any]:
    from app.grid.errors import ConfigurationError

    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read settings file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"settings file {path} must hold a JSON object")
    return data


def _merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_settings(config_path: Optional[Union[str, Path]] = None, overrides: Optional[dict[str, Any]] = None) -> RunSettings:
    """Defaults, then ``FEASPATH_SOLVER_SETTINGS``, then ``config_path``, then ``overrides``.

    The environment file holds solver settings only; the config file may hold run keys plus a
    nested ``solver`` object.
    """
    from app.grid.errors import ConfigurationError

    data: dict[str, Any] = {}
    if settings.FEASPATH_SOLVER_SETTINGS:
        data = {"solver": _read_json(settings.FEASPATH_SOLVER_SETTINGS)}
    if config_path:
        data = _merge(data, _read_json(config_path))
    if overrides:
        data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    try:
        return RunSettings.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid settings: {exc}") from exc
