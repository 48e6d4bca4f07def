from datetime import datetime
from functools import lru_cache
from pathlib import Path

from sqlalchemy import Boolean, Column, DateTime, Float, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from luminet.config import luminet_home

# Create base class for models
Base = declarative_base()


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True)
    config_hash = Column(String, index=True)
    input_key = Column(String, index=True)  # sha256 over the sorted input hashes
    input_hashes = Column(Text)  # JSON
    checkpoint_versions = Column(Text)  # JSON
    outputs = Column(Text)  # JSON
    manifest_path = Column(String, nullable=True)
    wall_clock = Column(Float)  # seconds
    reproduction = Column(Boolean, default=False)
    created_at = Column(DateTime, default=datetime.now)


def database_url(home: Path | None = None) -> str:
    home = home or luminet_home()
    home.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{home / 'runs.db'}"


@lru_cache(maxsize=8)
def _session_factory(url: str) -> sessionmaker:
    engine = create_engine(url, connect_args={"check_same_thread": False})
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def session_factory(home: Path | None = None) -> sessionmaker:
    """Sessions on the run registry under ``home`` (LUMINET_HOME by default)"""
    return _session_factory(database_url(home))


# Get a database session
def get_db():
    db = session_factory()()
    try:
        yield db
    finally:
        db.close()
