"""Backend selection for the stepping loops.

The compiled extension is used when it imports; set ``LINEFDI_PURE_PYTHON=1``
to force the pure-Python fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_compiled = None
if os.environ.get("LINEFDI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None

affine_recursion = _compiled.affine_recursion if _compiled is not None else _fallback.affine_recursion

__all__ = ["BACKEND", "affine_recursion"]
