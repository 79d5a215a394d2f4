"""Scan kernel backend selection.

Prefers the compiled Cython extension; falls back to pure numpy when the
extension was not built. Set STREAMSSM_FORCE_NUMPY=1 to force the fallback
(used by the kernel parity tests and the backend benchmark).
"""

import os

if os.environ.get("STREAMSSM_FORCE_NUMPY"):
    from ._scan_np import scan_backward, scan_forward
    BACKEND = "numpy"
else:
    try:
        from ._scan_cy import scan_backward, scan_forward
        BACKEND = "cython"
    except ImportError:
        from ._scan_np import scan_backward, scan_forward
        BACKEND = "numpy"

__all__ = ["scan_forward", "scan_backward", "BACKEND"]
