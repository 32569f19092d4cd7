from pathlib import Path
from typing import Optional

from sqlalchemy.ext.asyncio import AsyncEngine, AsyncSession, async_sessionmaker, create_async_engine
from sqlalchemy.orm import declarative_base

from helpers import cache_dir

RUNS_DATABASE = "runs.db"

Base = declarative_base()


def database_url(db_path: Optional[Path] = None) -> str:
    db_path = Path(db_path) if db_path is not None else cache_dir() / RUNS_DATABASE
    db_path.parent.mkdir(parents=True, exist_ok=True)
    return f"sqlite+aiosqlite:///{db_path}"


def create_engine(db_path: Optional[Path] = None) -> AsyncEngine:
    return create_async_engine(
        database_url(db_path), connect_args={"check_same_thread": False}
    )


def create_session_factory(engine: AsyncEngine) -> async_sessionmaker[AsyncSession]:
    return async_sessionmaker(engine, class_=AsyncSession, expire_on_commit=False)


async def init_db(engine: AsyncEngine) -> None:
    """
    Creates the registry tables if they do not exist yet.
    """
    # Importing the models registers their tables on Base.metadata
    from . import models  # noqa: F401

    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)
