from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy.orm import sessionmaker

from app.api.deps import get_db
from app.db import make_engine
from app.grid.case_io import load_case
from app.models import Base

CASES_DIR = Path(__file__).parent / "cases"


@pytest.fixture
def cases_dir() -> Path:
    return CASES_DIR


@pytest.fixture(scope="session")
def two_bus():
    return load_case(CASES_DIR / "two_bus.m")


@pytest.fixture(scope="session")
def three_bus():
    return load_case(CASES_DIR / "three_bus.m")


@pytest.fixture(scope="session")
def case5():
    return load_case(CASES_DIR / "case5_pjm.m")


@pytest.fixture(scope="session")
def case9():
    return load_case(CASES_DIR / "case9.m")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20261016)


def two_bus_u(net, pg: float, qg: float, v1: float = 1.0) -> np.ndarray:
    """Control vector of the two-bus case from the injection at bus 2 and the slack voltage."""
    u = np.zeros(net.controls.size)
    u[net.control_index("pg:2")] = pg
    u[net.control_index("qg:2")] = qg
    u[net.control_index("vg:1")] = v1
    return u


@pytest.fixture
def db_session():
    engine = make_engine("sqlite://")
    Base.metadata.create_all(bind=engine)
    Session = sessionmaker(autocommit=False, autoflush=False, bind=engine, future=True)
    with Session() as session:
        yield session
    engine.dispose()


@pytest.fixture
def client():
    from api_main import app

    engine = make_engine("sqlite://")
    Base.metadata.create_all(bind=engine)
    Session = sessionmaker(autocommit=False, autoflush=False, bind=engine, future=True)

    def override_get_db():
        db = Session()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = override_get_db
    yield TestClient(app)
    app.dependency_overrides.clear()
    engine.dispose()


@pytest.fixture(scope="session")
def two_bus_path(two_bus):
    """Short certified cost run on the two-bus case."""
    from app.config import RunSettings
    from app.grid.sequential import certify_path, run

    path = run(two_bus, two_bus.file_dispatch(), RunSettings(max_iterations=3))
    certify_path(path, two_bus)
    return path
