"""Kernel backend selection.

The compiled extension (``retrace._kernels``, Cython) is preferred when it
imported cleanly; otherwise the pure-numpy reference in ``_reference`` is
used. ``RETRACE_BACKEND`` forces the choice: ``compiled``, ``python``, or
``auto`` (default). Both backends implement the same kernel signatures and
agree to floating-point noise; they are not bit-identical because their
reduction orders differ.
"""

import os

from . import _reference

try:
    from . import _kernels
except ImportError:  # extension not built; numpy fallback
    _kernels = None


def _select():
    choice = os.environ.get("RETRACE_BACKEND", "auto").lower()
    if choice == "python":
        return _reference
    if choice == "compiled":
        if _kernels is None:
            raise ImportError(
                "RETRACE_BACKEND=compiled but retrace._kernels is not built"
            )
        return _kernels
    if choice != "auto":
        raise ValueError(f"RETRACE_BACKEND must be auto/compiled/python, got {choice!r}")
    return _kernels if _kernels is not None else _reference


kernels = _select()
BACKEND = kernels.BACKEND_NAME


def available_backends():
    """Name -> module for every importable backend (used by tests and benchmarks)."""
    out = {"python": _reference}
    if _kernels is not None:
        out["compiled"] = _kernels
    return out
