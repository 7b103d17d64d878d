"""Backend dispatch for the hot numeric kernels.

The default backend is numba (jitted serial loops).  Set the
environment variable ``ATTNREG_BACKEND=numpy`` before import, or call
``set_backend("numpy")``, to use the pure-numpy fallback.  Both
backends implement the same contracts and agree to ~1e-6; see
benchmarks/bench_kernels.py for a speed comparison.
"""

import os

from . import numpy_impl

_BACKENDS = {"numpy": numpy_impl}

try:
    from . import numba_impl

    _BACKENDS["numba"] = numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

_requested = os.environ.get("ATTNREG_BACKEND", "numba").lower()
if _requested not in _BACKENDS:
    _requested = "numba" if "numba" in _BACKENDS else "numpy"
_active = _BACKENDS[_requested] if _requested in _BACKENDS else numpy_impl


def set_backend(name):
    """Switch kernel backend at runtime ('numba' or 'numpy')."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_BACKENDS)}")
    _active = _BACKENDS[name]


def backend_name():
    for k, v in _BACKENDS.items():
        if v is _active:
            return k
    return "numpy"


def available_backends():
    return sorted(_BACKENDS)


def conv_forward(x, w, stride, pad):
    return _active.conv_forward(x, w, stride, pad)


def conv_backward_w(g, x, w_shape, stride, pad):
    return _active.conv_backward_w(g, x, w_shape, stride, pad)


def conv_backward_x(g, w, x_shape, stride, pad):
    return _active.conv_backward_x(g, w, x_shape, stride, pad)


def grid_sample_forward(img, coords):
    return _active.grid_sample_forward(img, coords)


def grid_sample_backward(g, img, coords):
    return _active.grid_sample_backward(g, img, coords)
