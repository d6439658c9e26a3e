"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``VQSPIKE_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("VQSPIKE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

lif_forward = _impl.lif_forward
lif_backward = _impl.lif_backward
psp_forward = _impl.psp_forward
psp_backward = _impl.psp_backward
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "lif_forward", "lif_backward", "psp_forward", "psp_backward", "im2col", "col2im"]
