"""Select the simulation kernel: the compiled extension when available, else pure Python.

Set ``IPSAVG_PURE=1`` to force the pure-Python kernel.
"""

from __future__ import annotations

import os

from . import _pycore

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

BACKENDS = ("compiled", "python")


def available() -> tuple[str, ...]:
    return BACKENDS if _core is not None else ("python",)


def default_backend() -> str:
    if os.environ.get("IPSAVG_PURE", "") not in ("", "0") or _core is None:
        return "python"
    return "compiled"


def get_kernel(name: str | None = None):
    name = name or default_backend()
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled kernel is not built; reinstall the package or use backend='python'")
        return _core.run_kernel
    if name == "python":
        return _pycore.run_kernel
    raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
