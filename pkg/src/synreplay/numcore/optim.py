"""Named parameter store with AdamW state."""

import numpy as np

from synreplay import backend
from synreplay.numcore.tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor map plus per-parameter Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(values, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros(t.shape)
        self._v[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self.params[name]
            if t.values.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.values.shape}")
            t.values[...] = arr


def adamw_step(store: ParamStore, lr: float = 1e-4, betas=(0.9, 0.999),
               weight_decay: float = 1e-2, eps: float = 1e-8,
               skip: tuple = ()) -> None:
    """Apply one decoupled-weight-decay Adam step to every parameter.

    Decay acts on the parameter itself, never on the gradient.  Parameters
    listed in ``skip`` are left untouched (used to freeze the temperature).
    """
    missing = [n for n, t in store.params.items() if n not in skip and t.grad is None]
    if missing:
        raise RuntimeError(f"adamw_step: missing gradients for {missing}")
    store.step_count += 1
    b1, b2 = betas
    for name, t in store.params.items():
        if name in skip:
            continue
        g = np.ascontiguousarray(t.grad).reshape(-1)
        backend.adamw_update(t.values.reshape(-1), g,
                             store._m[name].reshape(-1), store._v[name].reshape(-1),
                             store.step_count, lr, b1, b2, eps, weight_decay)
