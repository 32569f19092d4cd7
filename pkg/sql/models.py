from sqlalchemy import Column, DateTime, Integer, String

from .database import Base


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)
    config_hash = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    code_version = Column(String, nullable=False)
    started_at = Column(DateTime, nullable=False)
    finished_at = Column(DateTime, nullable=True)
    status = Column(String, nullable=False, default="running")
    artifact_path = Column(String, nullable=True)
