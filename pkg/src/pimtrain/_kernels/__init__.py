"""MAC kernel backend selection.

Prefers the compiled extension when it imported cleanly, otherwise falls
back to the pure-numpy reference. Both implement the same contract and are
bit-for-bit equivalent; `backend_name` reports which one is active and
`force_backend` lets tests and the benchmark pin one explicitly. The
PIMTRAIN_KERNEL environment variable (auto | compiled | numpy) pins the
choice at import time; see benchmarks/bench_kernels.py for when each wins.
"""
import os

from . import _macref
from ._macref import (
    SCHEME_BIT_SERIAL,
    SCHEME_DIFFERENTIAL,
    SCHEME_NATIVE,
    conversions_per_group,
    scheme_id,
)

try:
    from . import _mackern

    _COMPILED = _mackern
except ImportError:
    _COMPILED = None

_active = _COMPILED if _COMPILED is not None else _macref

_env = os.environ.get("PIMTRAIN_KERNEL", "auto")
if _env == "numpy":
    _active = _macref
elif _env == "compiled" and _COMPILED is None:
    raise ImportError("PIMTRAIN_KERNEL=compiled but the extension is missing")


def backend_name() -> str:
    return "compiled" if _active is _COMPILED and _COMPILED is not None else "numpy"


def have_compiled() -> bool:
    return _COMPILED is not None


def force_backend(name: str):
    """Pin the kernel backend: 'compiled', 'numpy', or 'auto'."""
    global _active
    if name == "numpy":
        _active = _macref
    elif name == "compiled":
        if _COMPILED is None:
            raise RuntimeError("compiled kernel is not available")
        _active = _COMPILED
    elif name == "auto":
        _active = _COMPILED if _COMPILED is not None else _macref
    else:
        raise ValueError(f"unknown backend {name!r}")


def mac_layer(*args, **kwargs):
    return _active.mac_layer(*args, **kwargs)
