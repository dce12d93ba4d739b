"""Backend selection for the convolution unfold kernels.

The compiled extension is used when it imports cleanly; setting
``SIMTRIPLET_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("SIMTRIPLET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
else:
    _compiled = None

if _compiled is not None:
    BACKEND = "cython"


def im2col(x, kh, kw, stride, pad):
    if _compiled is not None and x.flags.c_contiguous:
        return _compiled.im2col(x, kh, kw, stride, pad)
    return _kernels_py.im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    if _compiled is not None:
        return _compiled.col2im(
            cols if cols.flags.c_contiguous else cols.copy(), tuple(shape), kh, kw, stride, pad
        )
    return _kernels_py.col2im(cols, shape, kh, kw, stride, pad)
