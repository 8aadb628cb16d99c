"""Convolution hot loops: compiled extension with a numpy fallback.

The compiled backend is used when it imports; set ``EQUIVAE_PURE_PYTHON=1``
to force the fallback. Both expose ``im2col`` and ``col2im`` with identical
semantics.
"""

import os
from types import SimpleNamespace

from . import _pykernels

_python = SimpleNamespace(name="python", im2col=_pykernels.im2col, col2im=_pykernels.col2im)

try:
    from . import _ckernels

    _compiled = SimpleNamespace(name="cython", im2col=_ckernels.im2col, col2im=_ckernels.col2im)
except ImportError:  # extension not built
    _compiled = None


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name):
    if name == "python":
        return _python
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


if _compiled is not None and os.environ.get("EQUIVAE_PURE_PYTHON", "") not in ("1", "true"):
    active = _compiled
else:
    active = _python

BACKEND = active.name
im2col = active.im2col
col2im = active.col2im


def set_backend(name):
    """Switch the module-level kernels; returns the previous backend name."""
    global BACKEND, im2col, col2im
    prev = BACKEND
    b = get_backend(name)
    BACKEND, im2col, col2im = b.name, b.im2col, b.col2im
    return prev
