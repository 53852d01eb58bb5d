"""Hot per-sample kernels with a compiled backend and a numpy fallback.

The compiled module is used when it has been built (``pip install -e .``
compiles it) unless ``HARVEST_PURE_PYTHON=1`` is set. ``BACKEND`` names
the active choice.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("HARVEST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

softmax_row = _active.softmax_row
softmax_rows = _active.softmax_rows
target_conf = _active.target_conf
sq_dist = _active.sq_dist
sq_dists = _active.sq_dists
median_sq_dist = _active.median_sq_dist
xent_resid = _active.xent_resid
xent_grad = _active.xent_grad

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "softmax_row",
    "softmax_rows",
    "target_conf",
    "sq_dist",
    "sq_dists",
    "median_sq_dist",
    "xent_resid",
    "xent_grad",
]
