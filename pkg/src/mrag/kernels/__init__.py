"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension is used when it has been built; set
``MRAG_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
active implementation.
"""
import os

from . import _pykernels

pure = _pykernels
compiled = None

if os.environ.get("MRAG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "python"

row_norms = _impl.row_norms
cosine_topk = _impl.cosine_topk
cosine_topk_batch = _impl.cosine_topk_batch
lcs_length = _impl.lcs_length

__all__ = [
    "BACKEND",
    "compiled",
    "pure",
    "row_norms",
    "cosine_topk",
    "cosine_topk_batch",
    "lcs_length",
]
