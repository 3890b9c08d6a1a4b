from collections.abc import Iterator

from sqlalchemy.orm import Session

from app.db import SessionLocal


def get_db() -> Iterator[Session]:
    """Request-scoped session, rolled back when the request fails."""
    with SessionLocal() as db:
        try:
            yield db
        except Exception:
            db.rollback()
            raise
