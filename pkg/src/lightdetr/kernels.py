"""Hot-kernel dispatch.

The compiled ``_ckernels`` module is used when it was built; otherwise the
numpy versions in ``_pykernels`` are used.  Set ``LIGHTDETR_PURE_PYTHON=1``
to force the fallback.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("LIGHTDETR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

bilinear_sample = _impl.bilinear_sample
ms_deform_attn = _impl.ms_deform_attn
greedy_nms = _impl.greedy_nms
linear_sum_assignment = _impl.linear_sum_assignment


def backends():
    """Available kernel implementations keyed by name."""
    out = {"python": python}
    if compiled is not None:
        out["cython"] = compiled
    return out
