import os
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

from gs_chunked_io.async_collections import AsyncSet


MAX_SWEEP_CONCURRENCY = 4
"""Scenarios run concurrently by a sweep. Each scenario's fabric stays single threaded."""

class Executor:
    max_workers = MAX_SWEEP_CONCURRENCY
    _executor: Optional[ThreadPoolExecutor] = None

    @classmethod
    def get(cls) -> ThreadPoolExecutor:
        cls._executor = cls._executor or ThreadPoolExecutor(max_workers=cls.max_workers)
        return cls._executor

    @classmethod
    def shutdown(cls):
        if cls._executor:
            cls._executor.shutdown(wait=True)
            cls._executor = None

def resolve_workers(workers: Optional[int]=None) -> int:
    if workers is None:
        workers = int(os.environ.get("CCNCHECK_WORKERS", MAX_SWEEP_CONCURRENCY))
    if workers < 1:
        raise ValueError(f"Worker count must be positive, got {workers}")
    return min(workers, Executor.max_workers)

def async_set(concurrency: int=MAX_SWEEP_CONCURRENCY):
    return AsyncSet(Executor.get(), concurrency)
