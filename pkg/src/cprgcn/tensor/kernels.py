"""Kernel backend selection.

The compiled extension is preferred when it was built; otherwise the numpy
implementation takes over.  ``CPRGCN_KERNELS`` chooses explicitly:

``auto`` (default)
    compiled max-pool; compiled convolution for narrow layers, numpy/BLAS
    im2col once ``C_in * C_out`` exceeds :data:`BLAS_CROSSOVER`
``cython`` / ``numpy``
    one backend for everything
"""

import os
import types

from . import _kernels_py

BLAS_CROSSOVER = 256

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _auto_backend():
    c = _ckernels

    def conv3d_forward(x, w, b):
        mod = c if w.shape[0] * w.shape[1] <= BLAS_CROSSOVER else _kernels_py
        return mod.conv3d_forward(x, w, b)

    def conv3d_backward(x, w, gout, need_dx=True):
        mod = c if w.shape[0] * w.shape[1] <= BLAS_CROSSOVER else _kernels_py
        return mod.conv3d_backward(x, w, gout, need_dx)

    return types.SimpleNamespace(
        BACKEND="auto",
        conv3d_forward=conv3d_forward,
        conv3d_backward=conv3d_backward,
        maxpool3d_forward=c.maxpool3d_forward,
        maxpool3d_backward=c.maxpool3d_backward,
    )


def available() -> list[str]:
    return ["numpy"] if _ckernels is None else ["numpy", "cython", "auto"]


def use(name: str):
    """Switch the active backend at runtime; returns the backend namespace."""
    global backend, BACKEND
    if name == "numpy":
        backend = _kernels_py
    elif name in ("cython", "auto"):
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        backend = _ckernels if name == "cython" else _auto_backend()
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = backend.BACKEND
    return backend


backend = _kernels_py
BACKEND = "numpy"
_choice = os.environ.get("CPRGCN_KERNELS", "auto").lower()
if _choice == "numpy" or (_choice == "auto" and _ckernels is None):
    use("numpy")
else:
    use(_choice)
