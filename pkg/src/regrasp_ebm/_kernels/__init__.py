"""Hot-kernel dispatch.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used.  Set ``REGRASP_EBM_PURE_PYTHON=1`` to force the fallback.
"""

import contextlib
import os

from . import _fallback

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

_FUNCS = ("outer_add", "selu_select", "scale_outer", "pair_softmin", "feasibility_matrix")

_impl = None
BACKEND = None


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def set_backend(name):
    global _impl, BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        _impl = _compiled
    elif name == "python":
        _impl = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    for f in _FUNCS:
        globals()[f] = getattr(_impl, f)


@contextlib.contextmanager
def use_backend(name):
    prev = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


if os.environ.get("REGRASP_EBM_PURE_PYTHON") or _compiled is None:
    set_backend("python")
else:
    set_backend("cython")
