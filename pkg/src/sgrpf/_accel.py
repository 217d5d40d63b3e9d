"""Backend switch for the hot kernels.

Every hot loop in the package has two implementations: a numba ``@njit``
kernel written as explicit loops, and a vectorised numpy path.  The numba
path is used when numba imports and ``SGRPF_DISABLE_NUMBA`` is unset or
``0``.  Both paths produce the same numbers up to libm rounding; the test
suite runs the comparison.
"""

import contextlib
import os

_flag = os.environ.get("SGRPF_DISABLE_NUMBA", "0").strip().lower()

try:
    if _flag not in ("", "0", "false", "no"):
        raise ImportError("numba disabled by SGRPF_DISABLE_NUMBA")
    import numba
except ImportError:
    numba = None

HAVE_NUMBA = numba is not None

_state = {"numba": HAVE_NUMBA}


def njit(fn):
    """``numba.njit`` when available, else ``None`` (caller uses numpy)."""
    if numba is None:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


def use_numba():
    return _state["numba"]


def backend():
    return "numba" if _state["numba"] else "numpy"


@contextlib.contextmanager
def forced_backend(name):
    """Temporarily select ``"numba"`` or ``"numpy"`` kernels."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not available")
    old = _state["numba"]
    _state["numba"] = name == "numba"
    try:
        yield
    finally:
        _state["numba"] = old
