"""Kernel backend selection.

The compiled extension (`flexconv._native`) is preferred; the numpy fallback
(`flexconv._reference`) is selected at import when the extension is missing.
Both expose identical kernel signatures. Tests and the benchmark can pin a
backend explicitly.
"""

from __future__ import annotations

import contextlib
import warnings

from . import _reference

try:
    from . import _native
except ImportError:  # pragma: no cover - exercised only on fallback installs
    _native = None
    warnings.warn(
        "flexconv._native extension not built; using the pure-numpy fallback "
        "kernels (correct but slower)",
        RuntimeWarning,
        stacklevel=2,
    )

_active = _native if _native is not None else _reference


def backend_name() -> str:
    return "native" if _active is _native and _native is not None else "reference"


def active():
    """The module providing the kernel implementations currently in use."""
    return _active


def get(name: str):
    if name == "native":
        if _native is None:
            raise RuntimeError("native backend requested but the extension is not built")
        return _native
    if name == "reference":
        return _reference
    raise ValueError(f"unknown backend {name!r}")


def have_native() -> bool:
    return _native is not None


@contextlib.contextmanager
def use(name: str):
    """Temporarily pin the active backend (tests, benchmark comparisons)."""
    global _active
    prev = _active
    _active = get(name)
    try:
        yield _active
    finally:
        _active = prev
