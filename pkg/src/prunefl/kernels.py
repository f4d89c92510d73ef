"""Kernel backend selection.

The compiled extension is used when importable. Set ``PRUNEFL_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("PRUNEFL_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

spmm_coo = _impl.spmm_coo
greedy_prefix = _impl.greedy_prefix
im2col = _impl.im2col
col2im = _impl.col2im


def backends():
    """Available kernel modules keyed by name, fallback always present."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
