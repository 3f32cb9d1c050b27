"""Thread-count control for the compiled pipeline stages.

The PANOPTIC_THREADS environment variable caps internal parallelism;
0 or unset means "use whatever the machine offers".
"""
from __future__ import annotations

import os

import numba

from .errors import InvalidInputError

ENV_VAR = "PANOPTIC_THREADS"


def thread_cap() -> int:
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return 0
    try:
        cap = int(raw)
    except ValueError as e:
        raise InvalidInputError(f"{ENV_VAR}={raw!r} is not an integer") from e
    if cap < 0:
        raise InvalidInputError(f"{ENV_VAR} must be >= 0")
    return cap


def apply_thread_cap() -> int:
    """Clamp numba's thread pool to the configured cap; returns the
    number of threads in use."""
    available = numba.config.NUMBA_NUM_THREADS
    cap = thread_cap()
    n = available if cap == 0 else min(cap, available)
    numba.set_num_threads(n)
    return n
