"""Kernel backend selection and thread-count control.

The compiled extension `animvox._core` is preferred; the pure-numpy
reference `animvox._pure` is the fallback. Selection happens once at import:

* ``ANIMVOX_BACKEND=pure``      force the reference kernels
* ``ANIMVOX_BACKEND=compiled``  require the extension (ImportError if absent)
* unset                         compiled if importable, else pure

Thread count defaults to the available CPUs and can be pinned with
``set_num_threads`` or the ``ANIMVOX_THREADS`` environment variable; it caps
every internal parallel loop. The pure backend ignores it.
"""

from __future__ import annotations

import os

_requested = os.environ.get("ANIMVOX_BACKEND", "auto").lower()

if _requested == "pure":
    from . import _pure as kernels
elif _requested == "compiled":
    from . import _core as kernels  # type: ignore[no-redef]
elif _requested == "auto":
    try:
        from . import _core as kernels  # type: ignore[no-redef]
    except ImportError:
        from . import _pure as kernels  # type: ignore[no-redef]
else:
    raise ImportError(f"ANIMVOX_BACKEND={_requested!r}: expected 'pure', 'compiled', or 'auto'")


def backend_name() -> str:
    return "compiled" if kernels.IS_COMPILED else "pure"


def _initial_threads() -> int:
    env = os.environ.get("ANIMVOX_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


_num_threads = _initial_threads()


def get_num_threads() -> int:
    return _num_threads


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)
