"""Backend selection for the hot per-example kernels.

Two interchangeable implementations exist: a compiled one (numba) and a
vectorized pure-numpy one. The environment variable ``DPAUDIT_BACKEND``
selects between them:

* unset or ``auto``: use numba when it imports cleanly, else numpy
* ``numba``: require numba, raise if it is unavailable
* ``numpy``: force the pure-numpy path

The choice is made once at import time so that a single process runs one
backend throughout, which keeps recorded training tapes bit-reproducible
within that process.
"""

import os
import warnings

_ENV_VAR = "DPAUDIT_BACKEND"

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def _resolve() -> str:
    requested = os.environ.get(_ENV_VAR, "auto").strip().lower() or "auto"
    if requested not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{_ENV_VAR} must be one of 'auto', 'numba', 'numpy', got {requested!r}"
        )
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        if not HAVE_NUMBA:
            raise ImportError(f"{_ENV_VAR}=numba but numba is not importable")
        return "numba"
    if HAVE_NUMBA:
        return "numba"
    warnings.warn("numba unavailable, falling back to the pure-numpy kernels")
    return "numpy"


BACKEND = _resolve()
