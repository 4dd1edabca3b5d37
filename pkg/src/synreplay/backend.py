"""Kernel backend selection.

Two kernel implementations ship: a Cython core and a numpy fallback.  The
fused MLP forward stays on numpy in both modes - its matmuls hit BLAS,
which beats naive compiled loops at these sizes (see
benchmarks/bench_kernels.py) - while the per-parameter AdamW update loop
is bound to the compiled core when available (about an order of magnitude
faster).  Both AdamW implementations share the exact elementwise
expression, so parameter trajectories are bit-identical whichever backend
is selected.

Set SYNREPLAY_BACKEND=compiled|python to force the choice; forcing an
unavailable compiled core raises at import.
"""

import os

from synreplay import _purecore

_requested = os.environ.get("SYNREPLAY_BACKEND", "auto").strip().lower()

if _requested in ("", "auto"):
    try:
        from synreplay import _fastcore as _core
        BACKEND = "compiled"
    except ImportError:
        _core = _purecore
        BACKEND = "python"
elif _requested in ("compiled", "fast"):
    from synreplay import _fastcore as _core
    BACKEND = "compiled"
elif _requested in ("python", "pure", "numpy"):
    _core = _purecore
    BACKEND = "python"
else:
    raise RuntimeError(f"SYNREPLAY_BACKEND={_requested!r}: expected auto, compiled or python")

mlp3_tanh = _purecore.mlp3_tanh
adamw_update = _core.adamw_update
