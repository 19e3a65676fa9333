"""Backend selection for the hot loops.

The compiled extension is preferred; set ``RENET_PURE_PYTHON=1`` to force the
NumPy fallback (useful for benchmarking or when no C compiler is available).
"""
import os

from renet import _kernels_py

BACKEND = "python"

if os.environ.get("RENET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from renet import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
bilinear_sample = _impl.bilinear_sample


def backend_module(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from renet import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
