# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused 3-layer tanh MLP forward and the AdamW update.

The MLP kernel carries the denoiser's ancestral-sampling inner loop, which
dominates end-to-end runtime; the AdamW kernel carries every training step.
Loops run accumulator-style over contiguous weight rows so the compiler can
vectorize them without reordering any floating-point reduction; the AdamW
expression mirrors ``_purecore`` exactly, elementwise, so that kernel is
bit-identical across backends.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, tanh

cnp.import_array()


cdef inline void _linear(const double[:, ::1] w, const double[::1] b,
                         const double* x, double* out, Py_ssize_t d_in,
                         Py_ssize_t d_out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double xv
    for j in range(d_out):
        out[j] = b[j]
    for i in range(d_in):
        xv = x[i]
        for j in range(d_out):
            out[j] += xv * w[i, j]


def mlp3_tanh(double[:, ::1] x,
              double[:, ::1] w1, double[::1] b1,
              double[:, ::1] w2, double[::1] b2,
              double[:, ::1] w3, double[::1] b3):
    """tanh(tanh(x@w1+b1)@w2+b2)@w3+b3 for row-major float64 inputs."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t h1 = w1.shape[1], h2 = w2.shape[1], o = w3.shape[1]
    if w1.shape[0] != d or w2.shape[0] != h1 or w3.shape[0] != h2:
        raise ValueError("mlp3_tanh: layer dimensions do not chain")

    out_arr = np.empty((n, o), dtype=np.float64)
    a1_arr = np.empty(h1, dtype=np.float64)
    a2_arr = np.empty(h2, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] a1 = a1_arr
    cdef double[::1] a2 = a2_arr
    cdef Py_ssize_t r, j

    with nogil:
        for r in range(n):
            _linear(w1, b1, &x[r, 0], &a1[0], d, h1)
            for j in range(h1):
                a1[j] = tanh(a1[j])
            _linear(w2, b2, &a1[0], &a2[0], h1, h2)
            for j in range(h2):
                a2[j] = tanh(a2[j])
            _linear(w3, b3, &a2[0], &out[r, 0], h2, o)
    return out_arr


def adamw_update(double[::1] p, double[::1] g,
                 double[::1] m, double[::1] v,
                 long step, double lr, double beta1, double beta2,
                 double eps, double wd):
    """One decoupled-weight-decay Adam step, in place on flat views."""
    cdef Py_ssize_t n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            p[i] = p[i] - (lr * wd * p[i] + lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps))
