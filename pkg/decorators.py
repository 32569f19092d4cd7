import time
from contextlib import contextmanager
from functools import wraps
from inspect import iscoroutinefunction
from threading import Lock
from typing import Iterator

from grounding.utils._logger import timer_logger, training_logger
from grounding.utils.utils import WeakSupervisionViolation


class TargetAccessAudit:
    """
    Records reads of annotated target proposal ids while a weakly supervised section is running.

    Reads are only recorded between `start()` and `stop()`; outside of that, `record()` is a no-op.
    """

    def __init__(self):
        self._lock = Lock()
        self._depth = 0
        self.reads: list[str] = []

    @property
    def active(self) -> bool:
        return self._depth > 0

    def start(self) -> None:
        with self._lock:
            if self._depth == 0:
                self.reads = []
            self._depth += 1

    def stop(self) -> list[str]:
        with self._lock:
            self._depth = max(0, self._depth - 1)
            return list(self.reads)

    def record(self, query_id: str) -> None:
        if not self.active:
            return
        with self._lock:
            self.reads.append(query_id)


target_audit = TargetAccessAudit()


@contextmanager
def audited_section() -> Iterator[TargetAccessAudit]:
    """
    Context manager form of the audit, for code that is not a single function.

    Yields:
        TargetAccessAudit: The shared audit, active for the duration of the block.
    """
    target_audit.start()
    try:
        yield target_audit
    finally:
        target_audit.stop()


def weakly_supervised(func):
    """
    A decorator that audits a function for reads of target proposal ids.

    The audit only runs in debug builds (`__debug__`, i.e. not under `python -O`).
    If the wrapped function read any target proposal id, a WeakSupervisionViolation is raised
    after it returns.

    Args:
        func: The function to be decorated.

    Returns:
        The decorated function.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        if not __debug__:
            return func(*args, **kwargs)
        target_audit.start()
        try:
            result = func(*args, **kwargs)
        finally:
            reads = target_audit.stop()
        if reads:
            training_logger.error(
                f"{func.__name__} read the target proposal id of {len(reads)} queries: {sorted(set(reads))[:10]}"
            )
            raise WeakSupervisionViolation(
                f"{func.__name__} read annotated target proposals ({len(reads)} reads)."
            )
        training_logger.debug(f"{func.__name__} passed the target access audit.")
        return result

    return wrapper


def timeit(func):
    """
    A decorator that measures the execution time of a function.

    Works for plain functions and coroutine functions alike.

    Args:
        func: The function to be decorated.

    Returns:
        The decorated function.

    """

    def _log(start: float) -> None:
        elapsed_time = (time.perf_counter() - start) * 1_000  # Convert to milliseconds
        timer_logger.debug(
            f"{func.__module__}.{func.__name__} took {round(elapsed_time, 3)} ms to execute."
        )

    if iscoroutinefunction(func):

        @wraps(func)
        async def async_wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                return await func(*args, **kwargs)
            finally:
                _log(start)

        return async_wrapper

    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            _log(start)

    return wrapper
