"""Pure-numpy kernels, API-identical to the compiled core.

``adamw_update`` keeps the exact elementwise expression of the compiled
kernel so the two backends produce bit-identical parameter trajectories.
"""

import numpy as np


def mlp3_tanh(x, w1, b1, w2, b2, w3, b3):
    """tanh(tanh(x@w1+b1)@w2+b2)@w3+b3 for row-major float64 inputs."""
    if w1.shape[0] != x.shape[1] or w2.shape[0] != w1.shape[1] or w3.shape[0] != w2.shape[1]:
        raise ValueError("mlp3_tanh: layer dimensions do not chain")
    h = np.tanh(x @ w1 + b1)
    h = np.tanh(h @ w2 + b2)
    return h @ w3 + b3


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, wd):
    """One decoupled-weight-decay Adam step, in place on flat views."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    m[:] = beta1 * m + (1.0 - beta1) * g
    v[:] = beta2 * v + (1.0 - beta2) * (g * g)
    p[:] = p - (lr * wd * p + lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
