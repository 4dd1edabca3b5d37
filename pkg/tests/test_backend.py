import numpy as np
import pytest

from synreplay import _purecore, backend
from synreplay.numcore.rng import RngStream

try:
    from synreplay import _fastcore
except ImportError:
    _fastcore = None

needs_fast = pytest.mark.skipif(_fastcore is None, reason="compiled core not built")


def _mlp_args(rng, n=8, d=288, h1=128, h2=128, o=256):
    return (rng.normal((n, d)),
            rng.normal((d, h1)) * 0.05, rng.normal((h1,)) * 0.01,
            rng.normal((h1, h2)) * 0.05, rng.normal((h2,)) * 0.01,
            rng.normal((h2, o)) * 0.05, rng.normal((o,)) * 0.01)


def test_pure_mlp_matches_reference():
    rng = RngStream(1)
    x, w1, b1, w2, b2, w3, b3 = _mlp_args(rng, n=3, d=10, h1=6, h2=6, o=4)
    out = _purecore.mlp3_tanh(x, w1, b1, w2, b2, w3, b3)
    ref = np.tanh(np.tanh(x @ w1 + b1) @ w2 + b2) @ w3 + b3
    assert np.array_equal(out, ref)
    with pytest.raises(ValueError, match="chain"):
        _purecore.mlp3_tanh(x, w2, b1, w1, b2, w3, b3)


@needs_fast
def test_backends_agree_on_mlp():
    rng = RngStream(2)
    args = _mlp_args(rng)
    fast = _fastcore.mlp3_tanh(*args)
    pure = _purecore.mlp3_tanh(*args)
    assert np.allclose(fast, pure, rtol=1e-12, atol=1e-12)


@needs_fast
def test_backends_bitwise_identical_adamw():
    rng = RngStream(3)
    p = rng.normal((512,))
    g = rng.normal((512,))
    m = np.zeros(512)
    v = np.zeros(512)
    p2, g2, m2, v2 = p.copy(), g.copy(), m.copy(), v.copy()
    for step in range(1, 20):
        _fastcore.adamw_update(p, g, m, v, step, 1e-3, 0.9, 0.999, 1e-8, 1e-2)
        _purecore.adamw_update(p2, g2, m2, v2, step, 1e-3, 0.9, 0.999, 1e-8, 1e-2)
    assert p.tobytes() == p2.tobytes()
    assert m.tobytes() == m2.tobytes()
    assert v.tobytes() == v2.tobytes()


def test_selected_backend_exposes_kernels():
    assert backend.BACKEND in ("compiled", "python")
    assert callable(backend.mlp3_tanh)
    assert callable(backend.adamw_update)
