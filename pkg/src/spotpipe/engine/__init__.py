"""Replica event-loop kernel, compiled when available.

``run_replica`` is the compiled Cython kernel if the extension built,
otherwise the pure-Python fallback with identical semantics (bit-identical
results). Set ``SPOTPIPE_PURE_PYTHON=1`` to force the fallback;
``ENGINE_NAME`` reports which one is active.
"""

import os

from . import py_kernel

if os.environ.get("SPOTPIPE_PURE_PYTHON"):
    _impl = py_kernel
    ENGINE_NAME = "python"
else:
    try:
        from . import _kernel as _impl  # type: ignore[attr-defined]

        ENGINE_NAME = "compiled"
    except ImportError:
        _impl = py_kernel
        ENGINE_NAME = "python"

run_replica = _impl.run_replica

KIND_B = py_kernel.KIND_B
KIND_R = py_kernel.KIND_R
KIND_F = py_kernel.KIND_F
