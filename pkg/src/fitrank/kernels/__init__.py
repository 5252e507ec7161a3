"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``FIT_PURE_PYTHON=1``
to force the fallback.  Both backends stay importable through
:func:`backend_module` so tests and the benchmark can compare them.
"""
import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("FIT_PURE_PYTHON", "") != "1":
    _impl: ModuleType = _ckernels
    BACKEND = "compiled"
else:
    _impl = _pykernels
    BACKEND = "python"

AVAILABLE = ("compiled", "python") if _ckernels is not None else ("python",)


def backend_module(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _f32(x):
    import numpy as np

    return np.ascontiguousarray(x, dtype=np.float32)


def matmul_ordered(a, b):
    return _impl.matmul_ordered(_f32(a), _f32(b))


def candidate_similarity(user_stack, query_index, item_heads):
    import numpy as np

    return _impl.candidate_similarity(
        _f32(user_stack), np.ascontiguousarray(query_index, dtype=np.int64), _f32(item_heads)
    )


def summax_scores(sim):
    return _impl.summax_scores(_f32(sim))


def lss_scores(sim, w_row, b_row, w_col, b_col, w_out):
    return _impl.lss_scores(_f32(sim), _f32(w_row), _f32(b_row), _f32(w_col), _f32(b_col), _f32(w_out))


def flatten_fc_scores(sim, w_fc, b_fc, w_out):
    return _impl.flatten_fc_scores(_f32(sim), _f32(w_fc), _f32(b_fc), _f32(w_out))
