"""Pick the compiled kernels when built, else the NumPy fallback.

Set ``GAUSSVOL_BACKEND=python`` to force the fallback.
"""

import logging
import os

from . import _core_py

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("GAUSSVOL_BACKEND", "").lower() not in ("python", "numpy"):
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        log.debug("compiled core unavailable, using NumPy fallback")

BACKENDS = {"python": _core_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

ACTIVE = "compiled" if _compiled is not None else "python"


def get(name: str | None = None):
    name = name or ACTIVE
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}") from None


def default_threads() -> int:
    env = os.environ.get("GAUSSVOL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
