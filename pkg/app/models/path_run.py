from datetime import datetime, timezone
from typing import Optional

from sqlalchemy import Boolean, DateTime, Float, ForeignKey, Integer, String, Text, UniqueConstraint
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app.models.base import Base


class PathRun(Base):
    __tablename__ = "path_runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    case_name: Mapped[str] = mapped_column(String(128), index=True)
    objective: Mapped[str] = mapped_column(String(16))
    lam: Mapped[float] = mapped_column(Float, default=1.0)
    epsilon: Mapped[float] = mapped_column(Float, default=0.01)
    status: Mapped[str] = mapped_column(String(32), index=True, default="completed")
    termination: Mapped[str] = mapped_column(String(64), default="")
    iterations: Mapped[int] = mapped_column(Integer, default=0)
    initial_cost: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    final_cost: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    certified: Mapped[bool] = mapped_column(Boolean, default=False)
    document: Mapped[str] = mapped_column(Text)
    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), default=lambda: datetime.now(timezone.utc), index=True)

    iterates: Mapped[list["PathIterate"]] = relationship(
        back_populates="run", cascade="all, delete-orphan", order_by="PathIterate.iteration"
    )


class PathIterate(Base):
    __tablename__ = "path_iterates"
    __table_args__ = (UniqueConstraint("run_id", "iteration", name="uq_path_iterate_per_run"),)

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("path_runs.id", ondelete="CASCADE"), index=True)
    iteration: Mapped[int] = mapped_column(Integer)
    cost: Mapped[float] = mapped_column(Float)
    objective: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    step_norm: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    solver_time: Mapped[Optional[float]] = mapped_column(Float, nullable=True)

    run: Mapped[PathRun] = relationship(back_populates="iterates")
