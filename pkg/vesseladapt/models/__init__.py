"""
Database Models
One row per training run of an experiment grid
"""
from sqlalchemy import Column, DateTime, Float, Index, Integer, String
from sqlalchemy.sql import func

from vesseladapt.database import Base


class ExperimentRun(Base):
    """
    A (sweep point, seed) run and its outcome.
    `rundir` is unique: recording the same directory twice updates the existing row.
    """
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    experiment = Column(String(100), index=True, nullable=False)
    scenario = Column(String(30), nullable=False)
    sweep_kind = Column(String(20), nullable=False, default="none")
    sweep_value = Column(String(100), nullable=False, default="")
    seed = Column(Integer, nullable=False)
    rundir = Column(String(500), unique=True, nullable=False)
    status = Column(String(20), nullable=False, default="pending")
    config_hash = Column(String(64))
    target_vessel_dice = Column(Float)
    source_vessel_dice = Column(Float)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), onupdate=func.now())

    __table_args__ = (
        Index('idx_run_experiment_point', 'experiment', 'sweep_kind', 'sweep_value'),
    )
