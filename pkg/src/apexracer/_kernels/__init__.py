"""Hot-loop kernels: batched RK4 integration, Frenet projection, lookahead.

The compiled extension (Cython + C, SIMD/OpenMP) is picked at import when
present; the numpy backend is the drop-in fallback.  Force a choice with
APEXRACER_BACKEND={compiled,python}.
"""

import os

from .modelmath import PARAM_FIELDS, STATE_FIELDS  # noqa: F401

_choice = os.environ.get("APEXRACER_BACKEND", "").strip().lower()
if _choice not in ("", "compiled", "python"):
    raise ImportError(
        f"APEXRACER_BACKEND must be 'compiled' or 'python', got {_choice!r}")

if _choice == "python":
    from . import pybackend as _impl
else:
    try:
        from . import _fastcore as _impl
    except ImportError:
        if _choice == "compiled":
            raise
        from . import pybackend as _impl

BACKEND_NAME = _impl.BACKEND_NAME
integrate_batch = _impl.integrate_batch
frenet_batch = _impl.frenet_batch
lookahead_batch = _impl.lookahead_batch


def get_backend(name):
    """Return a specific backend module ('python' or 'compiled')."""
    if name == "python":
        from . import pybackend
        return pybackend
    if name == "compiled":
        from . import _fastcore
        return _fastcore
    raise ValueError(f"unknown backend {name!r}")
