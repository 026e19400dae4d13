"""Kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``COPPKIT_PURE=1`` to force the numpy fallback.
"""

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("COPPKIT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

weighted_quantile_sorted = _impl.weighted_quantile_sorted
gaussian_mixture_pdf = _impl.gaussian_mixture_pdf

__all__ = ["BACKEND", "weighted_quantile_sorted", "gaussian_mixture_pdf"]
