"""Dense-tensor autodiff engine, optimizer, RNG streams, checkpoints."""

from synreplay.numcore.checkpoint import (CheckpointError, file_sha256,
                                          fingerprint, load_arrays,
                                          save_arrays)
from synreplay.numcore.optim import ParamStore, adamw_step
from synreplay.numcore.rng import RngStream, derive, derive_key, stable_hash64
from synreplay.numcore.tensor import (NonFiniteError, ShapeError, Tensor,
                                      add, backward, clear_tape, concat, div,
                                      exp, forward_op, gather_labels,
                                      gather_rows, grad_enabled, log,
                                      log_softmax, matmul, mul, neg, no_grad,
                                      relu, reshape, softmax, sqrt, square, sub,
                                      tanh, tape_size, tmean, transpose, tsum)

__all__ = [
    "CheckpointError", "NonFiniteError", "ParamStore", "RngStream",
    "ShapeError", "Tensor", "adamw_step", "add", "backward", "clear_tape",
    "concat", "derive", "derive_key", "div", "exp", "file_sha256", "fingerprint",
    "forward_op", "gather_labels", "gather_rows", "grad_enabled", "log",
    "log_softmax", "load_arrays", "matmul", "mul", "neg", "no_grad", "relu",
    "reshape", "save_arrays", "softmax", "sqrt", "square", "stable_hash64", "sub",
    "tanh", "tape_size", "tmean", "transpose", "tsum",
]
