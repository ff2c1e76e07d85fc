"""Kernel backend selection.

The compiled extension (aortaseg._kernels, built from _kernels.pyx) and the
pure numpy module (aortaseg.kernels_numpy) expose the same two functions.
The extension is preferred when importable; set AORTASEG_BACKEND=numpy or
AORTASEG_BACKEND=compiled to force a choice. Thread count for the compiled
kernels defaults to 1 and can be raised with set_num_threads (the CLI's
--threads flag routes here).
"""

import os

from . import kernels_numpy

_compiled = None
_requested = os.environ.get("AORTASEG_BACKEND", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise ImportError(f"AORTASEG_BACKEND must be auto, compiled or numpy, got {_requested!r}")

if _requested in ("auto", "compiled"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _requested == "compiled":
            raise
        _compiled = None

_active = _compiled if _compiled is not None else kernels_numpy
_num_threads = max(1, int(os.environ.get("AORTASEG_THREADS", "1")))


def backend_name():
    return "compiled" if _active is _compiled and _compiled is not None else "numpy"


def have_compiled():
    return _compiled is not None


def set_num_threads(n):
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)


def get_num_threads():
    return _num_threads


def conv3d_from_padded(xpad, kernel, bias, out):
    _active.conv3d_from_padded(xpad, kernel, bias, out, _num_threads)


def conv3d_grad_kernel(xpad, gy, gk):
    _active.conv3d_grad_kernel(xpad, gy, gk, _num_threads)
