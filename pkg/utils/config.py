"""
Runtime configuration: defaults, environment overrides and the worker pool.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "CHAINSTACK_THREADS"
LOG_LEVEL_ENV = "CHAINSTACK_LOG_LEVEL"

DEFAULT_LAMBDA = 1.001
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100_000
DEFAULT_RHAT_THRESHOLD = 1.05
DEFAULT_STEP = 0.5
DEFAULT_SUMMARY = "mean_loglik"


def resolve_threads(cli_value: Optional[int] = None) -> int:
    """
    Decide how many worker threads to use.

    Args:
        cli_value: Value of --threads, or None when the flag was not given

    Returns:
        CHAINSTACK_THREADS if set, else the flag, else the available parallelism
    """
    env_value = os.getenv(THREADS_ENV, "").strip()
    if env_value:
        try:
            threads = int(env_value)
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, env_value)
        else:
            return max(1, threads)
    if cli_value is not None:
        return max(1, int(cli_value))
    return max(1, os.cpu_count() or 1)


def resolve_log_level(verbosity: int = 0) -> int:
    """Map -v counts (or CHAINSTACK_LOG_LEVEL) to a logging level."""
    if verbosity >= 2:
        return logging.DEBUG
    if verbosity == 1:
        return logging.INFO
    name = os.getenv(LOG_LEVEL_ENV, "WARNING").upper()
    return getattr(logging, name, logging.WARNING)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """
    Apply fn to every item, in order, on a thread pool.

    Results come back in input order whatever the scheduling, so callers stay
    deterministic. With threads <= 1 everything runs inline.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
