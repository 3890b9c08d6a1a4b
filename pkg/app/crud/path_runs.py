from typing import Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from app.models import PathIterate, PathRun
from app.schemas.path import PathDocument, read_path, write_document


def save_path_run(db: Session, doc: PathDocument, status: str = "completed") -> PathRun:
    costs = [it.cost for it in doc.iterations]
    run = PathRun(
        case_name=doc.case,
        objective=doc.objective,
        lam=doc.lam,
        epsilon=doc.epsilon,
        status=status,
        termination=doc.termination,
        iterations=doc.segments,
        initial_cost=costs[0] if costs else None,
        final_cost=costs[-1] if costs else None,
        certified=bool(doc.certificate and doc.certificate.certified),
        document=write_document(doc),
    )
    solver_times = doc.stats.solver_times
    for it in doc.iterations:
        run.iterates.append(
            PathIterate(
                iteration=it.index,
                cost=it.cost,
                objective=it.objective,
                step_norm=it.step_norm,
                solver_time=solver_times[it.index - 1] if 0 < it.index <= len(solver_times) else None,
            )
        )
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def get_path_run(db: Session, run_id: int) -> Optional[PathRun]:
    return db.get(PathRun, run_id)


def get_path_document(db: Session, run_id: int) -> Optional[PathDocument]:
    run = get_path_run(db, run_id)
    return read_path(run.document) if run else None


def list_path_runs(db: Session, limit: int = 50, case_name: Optional[str] = None) -> list[PathRun]:
    query = select(PathRun).order_by(PathRun.created_at.desc(), PathRun.id.desc()).limit(limit)
    if case_name:
        query = query.where(PathRun.case_name == case_name)
    return list(db.scalars(query).all())
