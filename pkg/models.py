# models.py

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, JSON, String
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime

Base = declarative_base()

# --- Run registry ---
class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True)
    subcommand = Column(String, nullable=False)  # solve/sample/reduce/validate
    seed = Column(String, nullable=False)  # u64 does not fit a signed BIGINT
    version = Column(String, nullable=False)
    config = Column(JSON, nullable=False)  # resolved config, as in the manifest
    out_dir = Column(String, nullable=True)
    status = Column(Integer, nullable=False, default=0)  # CLI exit status
    created_at = Column(DateTime, default=datetime.utcnow)

    checks = relationship("RunCheck", back_populates="run", cascade="all, delete")

class RunCheck(Base):
    __tablename__ = "run_checks"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False)
    name = Column(String, nullable=False)
    value = Column(Float, nullable=True)
    threshold = Column(Float, nullable=True)
    passed = Column(Boolean, nullable=False)

    run = relationship("ExperimentRun", back_populates="checks")
