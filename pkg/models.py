# models.py

import sqlalchemy as sa
from sqlalchemy.orm import sessionmaker, DeclarativeBase, Mapped, mapped_column, relationship, Session
from sqlalchemy import ForeignKey, func
from sqlalchemy.engine import Engine
from typing import Optional
from datetime import datetime
from pathlib import Path

REGISTRY_NAME = "registry.sqlite"


class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    __tablename__ = 'runs'
    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    phase: Mapped[str] = mapped_column(sa.String(32), nullable=False)
    dataset: Mapped[str] = mapped_column(sa.String(64), nullable=False)
    config_hash: Mapped[str] = mapped_column(sa.String(64), nullable=False, index=True)
    seed: Mapped[int] = mapped_column(sa.Integer, default=0)
    started_at: Mapped[datetime] = mapped_column(sa.DateTime, server_default=func.now())
    finished_at: Mapped[Optional[datetime]] = mapped_column(sa.DateTime, nullable=True)
    is_closed: Mapped[bool] = mapped_column(sa.Boolean, default=False)
    status: Mapped[str] = mapped_column(sa.String(16), default="running")
    elapsed: Mapped[Optional[float]] = mapped_column(sa.Float, nullable=True)

    steps: Mapped[list["StepMetric"]] = relationship(
        "StepMetric", back_populates="run", cascade="all, delete-orphan", order_by="StepMetric.step"
    )
    evals: Mapped[list["EvalRecord"]] = relationship("EvalRecord", back_populates="run", cascade="all, delete-orphan")
    checkpoints: Mapped[list["CheckpointRecord"]] = relationship(
        "CheckpointRecord", back_populates="run", cascade="all, delete-orphan"
    )


class StepMetric(Base):
    __tablename__ = 'step_metrics'
    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey('runs.id'), index=True)
    step: Mapped[int] = mapped_column(sa.Integer, nullable=False)
    lam: Mapped[float] = mapped_column(sa.Float, default=0.0)
    g_tilde: Mapped[Optional[float]] = mapped_column(sa.Float, nullable=True)
    l_er: Mapped[float] = mapped_column(sa.Float)
    l_erase: Mapped[float] = mapped_column(sa.Float)
    l_attn: Mapped[float] = mapped_column(sa.Float)
    l_pr: Mapped[float] = mapped_column(sa.Float)
    d_sq: Mapped[float] = mapped_column(sa.Float)
    drift: Mapped[float] = mapped_column(sa.Float, default=0.0)
    bound: Mapped[float] = mapped_column(sa.Float, default=0.0)
    lam_star: Mapped[Optional[float]] = mapped_column(sa.Float, nullable=True)
    g_true: Mapped[Optional[float]] = mapped_column(sa.Float, nullable=True)
    regret: Mapped[Optional[float]] = mapped_column(sa.Float, nullable=True)

    run: Mapped["RunRecord"] = relationship("RunRecord", back_populates="steps")


class EvalRecord(Base):
    __tablename__ = 'eval_summaries'
    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey('runs.id'), index=True)
    created_at: Mapped[datetime] = mapped_column(sa.DateTime, server_default=func.now())
    n_samples: Mapped[int] = mapped_column(sa.Integer)
    summary_json: Mapped[str] = mapped_column(sa.Text, nullable=False)

    run: Mapped["RunRecord"] = relationship("RunRecord", back_populates="evals")


class CheckpointRecord(Base):
    __tablename__ = 'checkpoints'
    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey('runs.id'), index=True)
    kind: Mapped[str] = mapped_column(sa.String(16), nullable=False)
    path: Mapped[str] = mapped_column(sa.String(512), nullable=False)
    checksum: Mapped[str] = mapped_column(sa.String(64), nullable=False)
    model_config_hash: Mapped[str] = mapped_column(sa.String(64), nullable=False)

    run: Mapped["RunRecord"] = relationship("RunRecord", back_populates="checkpoints")


def make_engine(run_dir) -> Engine:
    """Один реєстр SQLite на каталог запуску."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return sa.create_engine(f"sqlite:///{run_dir / REGISTRY_NAME}")


def make_session_maker(engine: Engine) -> sessionmaker[Session]:
    return sessionmaker(engine, expire_on_commit=False)


def create_db_tables(engine: Engine) -> None:
    Base.metadata.create_all(engine)
