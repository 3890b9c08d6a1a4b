import logging
from typing import Optional

from fastapi import APIRouter, Depends, HTTPException
from sqlalchemy.orm import Session

from app.api.deps import get_db
from app.config import load_run_settings
from app.crud import get_path_document, list_path_runs, save_path_run
from app.grid.case_io import parse_case
from app.grid.errors import (
    CaseParseError,
    CaseValidationError,
    CertificationError,
    ConfigurationError,
    FeasPathError,
    InfeasibleStartError,
    PowerFlowDivergedError,
    SingularJacobianError,
    SolverFailureError,
    UnsupportedCostError,
)
from app.grid.matrices import build_admittances
from app.grid.powerflow import evaluate_setpoint, generation_cost
from app.grid.sequential import certify_path, run
from app.schemas.path import (
    PathDocument,
    PathRequest,
    PathRunOut,
    PathRunSummaryOut,
    PfOut,
    PfRequest,
    dispatch_to_u,
    path_document,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/v1/grid", tags=["grid"])

_STATUS_BY_ERROR = (
    ((CaseParseError, CaseValidationError, UnsupportedCostError, ConfigurationError), 422),
    ((PowerFlowDivergedError, SingularJacobianError, InfeasibleStartError, CertificationError), 409),
    ((SolverFailureError,), 502),
)


def status_for(exc: FeasPathError) -> int:
    for kinds, status in _STATUS_BY_ERROR:
        if isinstance(exc, kinds):
            return status
    return 500


@router.post("/pf", response_model=PfOut)
def post_pf(payload: PfRequest) -> PfOut:
    net = parse_case(payload.case_text)
    u = dispatch_to_u(net, payload.dispatch) if payload.dispatch else net.file_dispatch()
    mats = build_admittances(net)
    op, report = evaluate_setpoint(net, mats, u)
    return PfOut(
        converged=op.solved,
        iterations=op.iterations,
        mismatch=op.mismatch,
        v=op.v.tolist(),
        theta=op.theta.tolist(),
        feasible=report.feasible,
        margins=report.margins,
        where=report.where,
        violations=report.violations(),
        cost=generation_cost(net, mats, op) if op.solved else None,
    )


@router.post("/paths", response_model=PathRunOut)
def post_path(payload: PathRequest, db: Session = Depends(get_db)) -> PathRunOut:
    net = parse_case(payload.case_text)
    cfg = load_run_settings(overrides=payload.settings)
    start = dispatch_to_u(net, payload.start) if payload.start else net.file_dispatch()
    target = dispatch_to_u(net, payload.target) if payload.target else None
    path = run(net, start, cfg, target)
    certify_path(path, net, cfg.samples_per_segment, cfg.feasibility_tol, cfg.pf_tol, cfg.pf_max_iter, cfg.workers)

    doc = path_document(path, net, cfg.objective, cfg.lam, cfg.epsilon)
    status = "certified" if path.certificate.certified else "uncertified"
    saved = save_path_run(db, doc, status=status)
    logger.info("stored path run %d for case %s (%s)", saved.id, net.name, status)
    return PathRunOut(run_id=saved.id, document=doc)


@router.get("/paths", response_model=list[PathRunSummaryOut])
def get_paths(limit: int = 50, case_name: Optional[str] = None, db: Session = Depends(get_db)) -> list[PathRunSummaryOut]:
    if not 1 <= limit <= 500:
        raise HTTPException(status_code=400, detail="limit must be within 1..500")
    return [PathRunSummaryOut.model_validate(row) for row in list_path_runs(db, limit=limit, case_name=case_name)]


@router.get("/paths/{run_id}", response_model=PathDocument)
def get_path(run_id: int, db: Session = Depends(get_db)) -> PathDocument:
    doc = get_path_document(db, run_id)
    if doc is None:
        raise HTTPException(status_code=404, detail="path run not found")
    return doc
