"""Hot-loop kernels with a compiled backend and a pure-Python fallback.

The compiled extension is used when it imports; set ``NPTL_PURE_PYTHON=1`` to
force the fallback. Both backends consume the random stream identically.
"""

import os

from . import _pykernels

if os.environ.get("NPTL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

log_gamma_fill = _impl.log_gamma_fill
ks_perm_stats = _impl.ks_perm_stats

__all__ = ["BACKEND", "log_gamma_fill", "ks_perm_stats"]
