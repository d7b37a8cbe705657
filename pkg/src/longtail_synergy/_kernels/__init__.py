"""Loss and metric kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``LTS_PURE_PYTHON=1`` to
force the numpy path. ``BACKEND`` names the active one.
"""
import os

from . import _fallback

try:
    from . import _compiled
except ImportError:
    _compiled = None

_core = _compiled
if os.environ.get("LTS_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
    _core = None

_impl = _core if _core is not None else _fallback
BACKEND = "compiled" if _core is not None else "python"

scl_fwd_bwd = _impl.scl_fwd_bwd
ldam_fwd_bwd = _impl.ldam_fwd_bwd
center_fwd_bwd = _impl.center_fwd_bwd
mv_fwd_bwd = _impl.mv_fwd_bwd
icd = _impl.icd


def backends():
    """Return the available kernel modules keyed by name."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


__all__ = [
    "BACKEND",
    "backends",
    "scl_fwd_bwd",
    "ldam_fwd_bwd",
    "center_fwd_bwd",
    "mv_fwd_bwd",
    "icd",
]
