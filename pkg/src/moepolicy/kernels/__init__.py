"""Kernel backend selection.

The compiled extension (`moepolicy.kernels._fastops`) is preferred; the numpy
reference backend is used when the extension is missing or when the
MOEPOLICY_PURE_PY environment variable is set to a non-empty value.
"""

import os

from . import _ref

BACKEND = "numpy"

if not os.environ.get("MOEPOLICY_PURE_PY"):
    try:
        from . import _fastops as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _ref
else:
    _impl = _ref

im2col = _impl.im2col
col2im = _impl.col2im
adam_step = _impl.adam_step

__all__ = ["BACKEND", "im2col", "col2im", "adam_step", "_ref"]
