import logging
from contextlib import asynccontextmanager

import cvxpy as cp
from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from sqlalchemy import text

from app.api import router
from app.api.grid import status_for
from app.config import load_run_settings, settings
from app.db import engine
from app.grid.errors import FeasPathError
from app.models import Base

logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger("feaspath.api")


@asynccontextmanager
async def lifespan(_: FastAPI):
    if settings.AUTO_CREATE_SCHEMA:
        Base.metadata.create_all(bind=engine)
        logger.info("schema created")
    logger.info("conic solvers available: %s", ", ".join(cp.installed_solvers()))
    yield


app = FastAPI(title="Feaspath API", version="0.1.0", lifespan=lifespan)
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS if settings.CORS_ORIGINS else ["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)
app.include_router(router)


@app.exception_handler(FeasPathError)
async def feaspath_error(_: Request, exc: FeasPathError) -> JSONResponse:
    logger.warning("%s: %s", type(exc).__name__, exc)
    return JSONResponse(status_code=status_for(exc), content={"detail": str(exc), "error": type(exc).__name__})


@app.get("/health/live")
def health_live() -> dict[str, str]:
    return {"status": "alive"}


@app.get("/health/ready")
def health_ready() -> dict[str, str]:
    solver = load_run_settings().solver.solver
    if solver.upper() not in cp.installed_solvers():
        raise HTTPException(status_code=503, detail=f"conic solver {solver} is not installed")
    with engine.connect() as conn:
        conn.execute(text("SELECT 1"))
    return {"status": "ready", "solver": solver}
