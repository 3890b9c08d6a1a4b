"""create path run tables

Revision ID: 20261016_0001
Revises:
Create Date: 2026-10-16
"""

from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


revision: str = "20261016_0001"
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    op.create_table(
        "path_runs",
        sa.Column("id", sa.Integer(), primary_key=True),
        sa.Column("case_name", sa.String(length=128), nullable=False),
        sa.Column("objective", sa.String(length=16), nullable=False),
        sa.Column("lam", sa.Float(), nullable=False, server_default="1.0"),
        sa.Column("epsilon", sa.Float(), nullable=False, server_default="0.01"),
        sa.Column("status", sa.String(length=32), nullable=False, server_default="completed"),
        sa.Column("termination", sa.String(length=64), nullable=False, server_default=""),
        sa.Column("iterations", sa.Integer(), nullable=False, server_default="0"),
        sa.Column("initial_cost", sa.Float(), nullable=True),
        sa.Column("final_cost", sa.Float(), nullable=True),
        sa.Column("certified", sa.Boolean(), nullable=False, server_default=sa.false()),
        sa.Column("document", sa.Text(), nullable=False),
        sa.Column("created_at", sa.DateTime(timezone=True), nullable=False, server_default=sa.func.now()),
    )
    op.create_index("ix_path_runs_id", "path_runs", ["id"], unique=False)
    op.create_index("ix_path_runs_case_name", "path_runs", ["case_name"], unique=False)
    op.create_index("ix_path_runs_status", "path_runs", ["status"], unique=False)
    op.create_index("ix_path_runs_created_at", "path_runs", ["created_at"], unique=False)

    op.create_table(
        "path_iterates",
        sa.Column("id", sa.Integer(), primary_key=True),
        sa.Column("run_id", sa.Integer(), sa.ForeignKey("path_runs.id", ondelete="CASCADE"), nullable=False),
        sa.Column("iteration", sa.Integer(), nullable=False),
        sa.Column("cost", sa.Float(), nullable=False),
        sa.Column("objective", sa.Float(), nullable=True),
        sa.Column("step_norm", sa.Float(), nullable=True),
        sa.Column("solver_time", sa.Float(), nullable=True),
        sa.UniqueConstraint("run_id", "iteration", name="uq_path_iterate_per_run"),
    )
    op.create_index("ix_path_iterates_id", "path_iterates", ["id"], unique=False)
    op.create_index("ix_path_iterates_run_id", "path_iterates", ["run_id"], unique=False)


def downgrade() -> None:
    op.drop_index("ix_path_iterates_run_id", table_name="path_iterates")
    op.drop_index("ix_path_iterates_id", table_name="path_iterates")
    op.drop_table("path_iterates")
    op.drop_index("ix_path_runs_created_at", table_name="path_runs")
    op.drop_index("ix_path_runs_status", table_name="path_runs")
    op.drop_index("ix_path_runs_case_name", table_name="path_runs")
    op.drop_index("ix_path_runs_id", table_name="path_runs")
    op.drop_table("path_runs")
