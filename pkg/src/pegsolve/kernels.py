"""Backend selection for the hot kernels.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when ``PEGSOLVE_PURE_PYTHON`` is set to a non-empty value other
than ``0``.
"""

import os

if os.environ.get("PEGSOLVE_PURE_PYTHON", "0") not in ("", "0"):
    from . import _pykernels as _impl
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _pykernels as _impl
        BACKEND = "python"

bfs_all_pairs = _impl.bfs_all_pairs
sample_paths = _impl.sample_paths
reference_actions = _impl.reference_actions
value_dp = _impl.value_dp
regret_matching = _impl.regret_matching
projected_replicator = _impl.projected_replicator

__all__ = [
    "BACKEND",
    "bfs_all_pairs",
    "sample_paths",
    "reference_actions",
    "value_dp",
    "regret_matching",
    "projected_replicator",
]
