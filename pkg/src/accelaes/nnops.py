"""Dense float64 linear algebra and transformer primitives.

Everything here is a pure function over 2-D float64 numpy arrays, so
repeated calls on the same inputs are bit-identical within a process.
No mixed precision, no autograd, no parallel reduction tricks.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)


def as_matrix(a) -> Matrix:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def row_softmax(m: Matrix) -> Matrix:
    """Softmax over each row, with per-row max subtraction for stability."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_last_axis(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the trailing axis of an n-D array."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Matrix, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> Matrix:
    """Per-row normalization to zero mean and unit variance, then affine."""
    x = as_matrix(x)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    cols = x.shape[1]
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ShapeError(
            f"layer_norm gain/bias must have length {cols}, "
            f"got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mean = x.mean(axis=1, keepdims=True)
    var = np.square(x - mean).mean(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU activation."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))
