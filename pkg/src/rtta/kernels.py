"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``RTTA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("RTTA_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

im2col = _impl.im2col
col2im = _impl.col2im
blur_separable = _impl.blur_separable
