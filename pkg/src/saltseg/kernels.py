"""Kernel backend selection.

The compiled extension is preferred; set SALTSEG_PURE_PYTHON=1 to force the
numpy reference implementation.
"""
import os

from . import _kernels_py

if os.environ.get("SALTSEG_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
label_components = _impl.label_components


def backends():
    """Available backend modules by name."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
