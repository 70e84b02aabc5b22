"""Select the layer kernels at import time.

The compiled extension is preferred; set ``GCSNTK_PURE_PYTHON=1`` to force
the numpy fallback.
"""
import os

from . import _kappa_py

BACKEND = "python"
layer_forward = _kappa_py.layer_forward
layer_backward = _kappa_py.layer_backward

if os.environ.get("GCSNTK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kappa_ext
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        layer_forward = _kappa_ext.layer_forward
        layer_backward = _kappa_ext.layer_backward
