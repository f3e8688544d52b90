"""Kernel backend selection: compiled extension or pure-numpy fallback.

The hot inner loops (cosupport selection, accumulator assembly, the
sequential stream pass and the cosparse projection used by the signal
generator) exist twice: as a Cython extension and as numpy code.  The
extension is preferred when importable; ``AOLEARN_BACKEND=numpy|cython``
overrides, and :func:`select` switches at runtime (used by the tests and the
backend benchmark).
"""

import os

from . import _kernels_np

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_BY_NAME = {"numpy": _kernels_np}
if _compiled is not None:
    _BY_NAME["cython"] = _compiled

_active = None


def available():
    """Names of the usable backends, preferred first."""
    return (["cython"] if _compiled is not None else []) + ["numpy"]


def select(name="auto"):
    """Activate a backend by name ('auto', 'numpy' or 'cython')."""
    global _active
    if name in (None, "auto"):
        name = available()[0]
    if name not in _BY_NAME:
        raise ValueError(
            f"unknown backend {name!r}; available: {', '.join(available())}"
        )
    _active = _BY_NAME[name]
    return _active


def active():
    """The currently selected kernel module."""
    return _active


select(os.environ.get("AOLEARN_BACKEND", "auto"))
