from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession, async_sessionmaker

from . import models, schemas
from decorators import timeit


@timeit
async def add_run(db: async_sessionmaker[AsyncSession], run: schemas.Run.Add) -> int:
    """
    Adds a run to the registry with status "running".

    Args:
        db (async_sessionmaker[AsyncSession]): The session factory.
        run (schemas.Run.Add): The run to be added.

    Returns:
        int: The id of the new run.
    """
    async with db() as db:
        row = models.Run(**run.model_dump(), status="running")
        db.add(row)
        await db.commit()
        return row.id


@timeit
async def finish_run(db: async_sessionmaker[AsyncSession], run: schemas.Run.Finish) -> None:
    """
    Records the outcome of a run.

    Args:
        db (async_sessionmaker[AsyncSession]): The session factory.
        run (schemas.Run.Finish): The run id, its status and finish time.

    Returns:
        None
    """
    async with db() as db:
        result = await db.execute(select(models.Run).where(models.Run.id == run.run_id))
        row = result.scalar_one()
        row.status = run.status
        row.finished_at = run.finished_at
        if run.artifact_path is not None:
            row.artifact_path = run.artifact_path
        await db.commit()


@timeit
async def get_run(
    db: async_sessionmaker[AsyncSession], run: schemas.Run.Get
) -> schemas.Run.Read | None:
    async with db() as db:
        result = await db.execute(select(models.Run).where(models.Run.id == run.run_id))
        row = result.scalar_one_or_none()
        return None if row is None else schemas.Run.Read.model_validate(row)


@timeit
async def list_runs(
    db: async_sessionmaker[AsyncSession], query: schemas.Run.List
) -> list[schemas.Run.Read]:
    """
    Retrieves the most recent runs, newest first, optionally for one command only.

    Args:
        db (async_sessionmaker[AsyncSession]): The session factory.
        query (schemas.Run.List): Command filter and maximum count.

    Returns:
        list[schemas.Run.Read]: The runs.
    """
    async with db() as db:
        statement = select(models.Run).order_by(models.Run.id.desc())
        if query.command is not None:
            statement = statement.where(models.Run.command == query.command)
        if query.n is not None:
            statement = statement.limit(query.n)
        result = await db.execute(statement)
        return [schemas.Run.Read.model_validate(row) for row in result.scalars()]
