import json
from datetime import datetime
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.grid.case_io import Network
from app.grid.errors import CaseValidationError

SCHEMA_VERSION = "1"


class DispatchIn(BaseModel):
    """Per-generator setpoints in generator-table order; active and reactive power in MW / MVAr."""

    pg_mw: list[float]
    vg: list[float]
    qg_mvar: Optional[list[float]] = None


class BoundsOut(BaseModel):
    phi_hi: list[float]
    phi_lo: list[float]
    v_hi: list[float]
    v_lo: list[float]


class IterationOut(BaseModel):
    index: int
    u: list[float]
    cost: float
    objective: Optional[float] = None
    step_norm: Optional[float] = None
    bounds: Optional[BoundsOut] = None


class CertificateFailureOut(BaseModel):
    segment: int
    alpha: float
    constraint: str
    margin: Optional[float] = None


class CertificateOut(BaseModel):
    segments: int
    samples: int
    certified: bool
    worst: dict[str, float] = Field(default_factory=dict)
    failures: list[CertificateFailureOut] = Field(default_factory=list)


class StatsOut(BaseModel):
    solver_times: list[float] = Field(default_factory=list)


class PathDocument(BaseModel):
    schema_version: str = SCHEMA_VERSION
    case: str
    objective: str
    lam: float
    epsilon: float
    termination: str
    control_names: list[str]
    iterations: list[IterationOut]
    certificate: Optional[CertificateOut] = None
    diagnostics: list[str] = Field(default_factory=list)
    stats: StatsOut = Field(default_factory=StatsOut)

    @property
    def segments(self) -> int:
        return len(self.iterations) - 1

    def setpoints(self) -> list[np.ndarray]:
        return [np.array(it.u) for it in self.iterations]


class RegionSliceDocument(BaseModel):
    schema_version: str = SCHEMA_VERSION
    case: str
    axes: list[str]
    x: list[float]
    y: list[float]
    labels: list[list[str]]
    counts: dict[str, int]
    certificate_violations: int
    base_u: list[float]


class PfRequest(BaseModel):
    case_text: str
    dispatch: Optional[DispatchIn] = None


class PfOut(BaseModel):
    converged: bool
    iterations: int
    mismatch: float
    v: list[float]
    theta: list[float]
    feasible: bool
    margins: dict[str, float]
    where: dict[str, str]
    violations: list[str]
    cost: Optional[float] = None


class PathRequest(BaseModel):
    case_text: str
    start: Optional[DispatchIn] = None
    target: Optional[DispatchIn] = None
    settings: dict[str, Any] = Field(default_factory=dict)


class PathRunOut(BaseModel):
    run_id: int
    document: PathDocument


class PathRunSummaryOut(BaseModel):
    id: int
    case_name: str
    objective: str
    lam: float
    epsilon: float
    status: str
    termination: str
    iterations: int
    initial_cost: Optional[float] = None
    final_cost: Optional[float] = None
    certified: bool
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)


def dispatch_to_u(net: Network, dispatch: DispatchIn) -> np.ndarray:
    base = net.base_mva
    qg = None if dispatch.qg_mvar is None else np.asarray(dispatch.qg_mvar, dtype=float) / base
    return net.u_from_dispatch(np.asarray(dispatch.pg_mw, dtype=float) / base, np.asarray(dispatch.vg, dtype=float), qg)


def u_to_dispatch(net: Network, u: np.ndarray) -> DispatchIn:
    """Inverse of :func:`dispatch_to_u`; slack-bus generators keep their case-file output."""
    layout = net.controls
    base = net.base_mva
    pg = np.array([g.p for g in net.generators])
    qg = np.array([g.q for g in net.generators])
    pg[layout.p_gens] = u[layout.sl_p]
    qg[layout.q_gens] = u[layout.sl_q]
    v_of_bus = dict(zip(layout.v_buses.tolist(), u[layout.sl_v].tolist()))
    vg = [v_of_bus.get(int(net.gen_bus[g]), net.generators[g].v_setpoint) for g in range(net.n_gen)]
    return DispatchIn(pg_mw=(pg * base).tolist(), vg=vg, qg_mvar=(qg * base).tolist())


def read_dispatch(path: Union[str, Path], net: Network) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseValidationError(f"cannot read dispatch file {path}: {exc}") from exc
    try:
        dispatch = DispatchIn.model_validate(data)
    except ValidationError as exc:
        raise CaseValidationError(f"invalid dispatch file {path}: {exc}") from exc
    return dispatch_to_u(net, dispatch)


def path_document(path: Any, net: Network, objective: str, lam: float, epsilon: float) -> PathDocument:
    """Document for a :class:`~app.grid.sequential.FeasiblePath`."""
    iterations = []
    for k, u in enumerate(path.setpoints):
        bounds = None
        if k > 0:
            b = path.bounds[k - 1]
            bounds = BoundsOut(phi_hi=b.phi_hi.tolist(), phi_lo=b.phi_lo.tolist(), v_hi=b.v_hi.tolist(), v_lo=b.v_lo.tolist())
        iterations.append(
            IterationOut(
                index=k,
                u=np.asarray(u).tolist(),
                cost=float(path.costs[k]),
                objective=float(path.objectives[k - 1]) if k > 0 else None,
                step_norm=float(path.step_norms[k - 1]) if k > 0 else None,
                bounds=bounds,
            )
        )
    certificate = None
    if path.certificate is not None:
        cert = path.certificate
        certificate = CertificateOut(
            segments=cert.segments,
            samples=cert.samples,
            certified=cert.certified,
            worst={k: float(v) for k, v in sorted(cert.worst.items())},
            failures=[
                CertificateFailureOut(
                    segment=f.segment,
                    alpha=f.alpha,
                    constraint=f.constraint,
                    margin=float(f.margin) if np.isfinite(f.margin) else None,
                )
                for f in cert.failures
            ],
        )
    return PathDocument(
        case=net.name,
        objective=objective,
        lam=lam,
        epsilon=epsilon,
        termination=path.termination,
        control_names=net.control_names(),
        iterations=iterations,
        certificate=certificate,
        diagnostics=list(path.diagnostics),
        stats=StatsOut(solver_times=list(path.solver_times)),
    )


def write_document(doc: BaseModel) -> str:
    return json.dumps(doc.model_dump(mode="json"), indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_path(path: Any, net: Network, objective: str = "cost", lam: float = 1.0, epsilon: float = 0.01) -> str:
    """Serialized path document: sorted keys, versioned, one trailing newline."""
    return write_document(path_document(path, net, objective, lam, epsilon))


def read_path(text: str) -> PathDocument:
    return PathDocument.model_validate_json(text)


def region_document(region: Any, net: Network) -> RegionSliceDocument:
    return RegionSliceDocument(
        case=net.name,
        axes=list(region.axes),
        x=region.x.tolist(),
        y=region.y.tolist(),
        labels=[[str(v) for v in row] for row in region.labels],
        counts=dict(sorted(region.counts.items())),
        certificate_violations=region.certificate_violations,
        base_u=region.base_u.tolist(),
    )
