"""Hot loops: environment stepping, training, evaluation, forest traversal.

The compiled extension is used when it imports; set ``GAPSHAP_PURE_PYTHON=1``
to force the reference implementation. Both produce identical floats.
"""

import importlib
import os

_FORCE_PURE = os.environ.get("GAPSHAP_PURE_PYTHON", "").strip() not in ("", "0")


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "cython":
        return importlib.import_module("gapshap._kernels._ckernels")
    if name == "python":
        return importlib.import_module("gapshap._kernels._pykernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if _FORCE_PURE:
    kernels = load_backend("python")
else:
    try:
        kernels = load_backend("cython")
    except ImportError:
        kernels = load_backend("python")

BACKEND = kernels.BACKEND
