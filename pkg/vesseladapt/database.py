"""
Run Ledger Storage
SQLite engine, session factory and declarative base of the experiment run ledger
"""
import logging
from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine, make_url
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from vesseladapt.config import get_settings

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


def make_engine(url: str) -> Engine:
    """Engine for the ledger; a file-backed SQLite ledger gets its directory created"""
    parsed = make_url(url)
    if parsed.get_backend_name() != "sqlite":
        return create_engine(url, pool_pre_ping=True)
    if parsed.database and parsed.database != ":memory:":
        Path(parsed.database).parent.mkdir(parents=True, exist_ok=True)
    # sessions cross threads under the API and the sweep runner
    return create_engine(url, connect_args={"check_same_thread": False})


engine = make_engine(get_settings().database_url)
SessionLocal = sessionmaker(bind=engine, autoflush=False, expire_on_commit=False)


def get_db():
    """Request-scoped ledger session"""
    session = SessionLocal()
    try:
        yield session
    finally:
        session.close()


def init_db(bind: Engine | None = None) -> None:
    """Create the ledger tables if they do not exist"""
    from vesseladapt.models import ExperimentRun  # noqa: F401  registers the table

    bind = bind or engine
    Base.metadata.create_all(bind=bind)
    logger.debug("Run ledger ready at %s", bind.url.render_as_string(hide_password=True))
