"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``METATRA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("METATRA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

social_force_rollout = _impl.social_force_rollout
best_of_k_errors = _impl.best_of_k_errors

__all__ = ["BACKEND", "social_force_rollout", "best_of_k_errors"]
