"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward ops compute with numpy and, when gradients are enabled and any
input requires them, push a backward closure onto a module-level tape.
``backward(loss)`` runs the tape in reverse, accumulates gradients on every
tensor that requires them, and clears the tape.  First-order only; the tape
is reset on every training step.

Non-finite values are a contract violation: every op output is checked and
raises ``NonFiniteError`` instead of letting NaN/Inf propagate.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_TAPE: list = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, arr: np.ndarray, inputs, bwd) -> Tensor:
    """Wrap an op result; record the backward closure when needed."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values produced")
    out = Tensor.__new__(Tensor)
    out.values = arr
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPE.append((out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- basic ops

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return _make("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: {a.shape} - {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from None
    av, bv, sa, sb = a.values, b.values, a.shape, b.shape
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: {a.shape} / {b.shape}") from None
    av, bv, sa, sb = a.values, b.values, a.shape, b.shape
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, sa),
                            _unbroadcast(-g * av / (bv * bv), sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.values, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _make("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.values)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.values)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log(av)
    return _make("log", y, (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.values)
    return _make("sqrt", y, (a,), lambda g: (g / (2.0 * y),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _make("square", av * av, (a,), lambda g: (2.0 * av * g,))


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _make("sum", np.sum(a.values, axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    count = a.values.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, shape).copy(),)

    return _make("mean", np.mean(a.values, axis=axis, keepdims=keepdims), (a,), bwd)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    return _make("concat", out, tuple(tensors),
                 lambda g: tuple(np.split(g, offsets, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: {old} -> {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def gather_rows(table, idx) -> Tensor:
    """Rows ``table[idx]`` with scatter-add backward into the table."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: table {table.shape}, idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")
    tshape = table.shape

    def bwd(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("gather_rows", table.values[idx].copy(), (table,), bwd)


def gather_labels(a, labels) -> Tensor:
    """Per-row picks ``a[i, labels[i]]``; used for cross-entropy."""
    a = _as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeError(f"gather_labels: {a.shape} with labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= a.shape[1]):
        raise ShapeError(f"gather_labels: label out of range for {a.shape}")
    rows = np.arange(a.shape[0])
    ashape = a.shape

    def bwd(g):
        ga = np.zeros(ashape)
        ga[rows, labels] = g
        return (ga,)

    return _make("gather_labels", a.values[rows, labels].copy(), (a,), bwd)


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "mean": tmean,
    "sum": tsum,
    "concat": lambda *ts, axis=-1: concat(list(ts), axis=axis),
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Name-dispatched forward; softmax/mean/sum reduce over the last axis
    or everything, matching the documented op set."""
    if op not in _OPS:
        raise ValueError(f"forward_op: unknown op {op!r}; known: {sorted(_OPS)}")
    return _OPS[op](*inputs, **kwargs)


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(x) into ``.grad`` of every tensor on the
    tape that requires gradients, then clear the tape."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not _TAPE:
        raise RuntimeError("backward: tape is empty")
    loss.grad = np.ones(())
    try:
        for out, inputs, bwd in reversed(_TAPE):
            g = out.grad
            if g is None:
                continue
            for inp, ginp in zip(inputs, bwd(g)):
                if ginp is None or not inp.requires_grad:
                    continue
                inp.grad = ginp if inp.grad is None else inp.grad + ginp
    finally:
        _TAPE.clear()
