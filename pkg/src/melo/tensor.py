"""Dense numeric primitives shared by the backbone, adapters and trainer.

Tensors are plain row-major ``numpy.ndarray`` objects. Weights and
activations are stored as float32; the trainer runs the same functions on
float64 copies, so every primitive here is dtype-preserving.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Return a C-contiguous array of ``dtype`` built from ``data``."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with an explicit shape check.

    Leading batch dimensions of ``a`` are allowed; ``b`` must be 2-D.
    """
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {tuple(x.shape)}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output ``y`` and upstream ``dy``."""
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm params {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match last axis of {tuple(x.shape)}"
        )
    return layernorm_with_stats(x, gamma, beta, eps)[0]


def layernorm_with_stats(x, gamma, beta, eps=1e-6):
    """Layer norm that also returns ``(xhat, rstd)`` for the backward pass."""
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * rstd
    return xhat * gamma + beta, xhat, rstd


def layernorm_backward(dy, xhat, rstd, gamma):
    """Return ``(dx, dgamma, dbeta)``; parameter grads are summed over all leading axes."""
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxhat = dy * gamma
    n = xhat.shape[-1]
    dx = rstd / n * (
        n * dxhat
        - np.sum(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    return x.dtype.type(0.5) * x * (1 + np.tanh(c * (x + k * x * x * x)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x * x * x))
    dt = (1 - t * t) * c * (1 + 3 * k * x * x)
    return dy * (0.5 * (1 + t) + 0.5 * x * dt)
