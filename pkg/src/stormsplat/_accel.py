"""Numba detection and the env switch between compiled and pure-numpy kernels.

Set ``STORMSPLAT_DISABLE_NUMBA=1`` to force the numpy fallback paths.
``STORMSPLAT_THREADS`` caps numba's worker count when ``--threads`` is not given.
"""

from __future__ import annotations

import os

try:
    import numba

    # the bundled TBB is too old for numba; omp avoids a warning on first parallel launch
    if not os.environ.get("NUMBA_THREADING_LAYER"):
        numba.config.THREADING_LAYER = "omp"
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAS_NUMBA and not _env_flag("STORMSPLAT_DISABLE_NUMBA")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


if HAS_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_threads(n: int | None = None) -> int:
    """Cap data-parallel workers; falls back to ``STORMSPLAT_THREADS`` then core count."""
    if n is None:
        env = os.environ.get("STORMSPLAT_THREADS")
        n = int(env) if env else (os.cpu_count() or 1)
    n = max(1, int(n))
    if HAS_NUMBA:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
