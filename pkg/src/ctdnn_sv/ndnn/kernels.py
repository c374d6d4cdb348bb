"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``CTDNN_SV_KERNELS=numpy`` to force the pure-Python path.
"""
import os

from . import _kernels_py

_impl = _kernels_py
if os.environ.get("CTDNN_SV_KERNELS", "").lower() != "numpy":
    try:
        from . import _ckernels as _impl  # noqa: F811
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def available_backends():
    out = {"numpy": _kernels_py}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
