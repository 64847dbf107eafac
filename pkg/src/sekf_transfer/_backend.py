"""Select the kernel implementation at import time.

The compiled ``_kernels`` extension is used when it is importable; otherwise
(or when the environment variable ``SEKF_TRANSFER_PURE_PYTHON`` is set to a
non-empty value) the numpy implementations in ``_pykernels`` are used.
"""
import os

from . import _pykernels

kernels = _pykernels
BACKEND = "python"

if not os.environ.get("SEKF_TRANSFER_PURE_PYTHON"):
    try:
        from . import _kernels as kernels  # noqa: F811
    except ImportError:
        kernels = _pykernels
    else:
        BACKEND = "cython"
