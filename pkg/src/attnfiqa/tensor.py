"""Dense float32 kernels used by the ViT forward pass.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float32 (row-major).
Products and reductions accumulate in float64 and are cast back to float32,
so results do not depend on BLAS float32 blocking.
"""

import numpy as np
from scipy.special import erf

DTYPE = np.float32
DEFAULT_LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x, name="x"):
    """Return ``x`` as a C-contiguous 2-D float32 array, checking finiteness."""
    m = np.ascontiguousarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: matrix contains non-finite entries")
    return m


def as_vector(x, length, name="x"):
    v = np.ascontiguousarray(x, dtype=DTYPE)
    if v.shape != (length,):
        raise ShapeError(f"{name}: expected shape ({length},), got {v.shape}")
    return v


def matmul(a, b):
    """Matrix product ``a @ b`` with float64 accumulation.

    Raises
    ------
    ShapeError
        If the inner dimensions differ.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)


def layer_norm(x, gamma, beta, eps=DEFAULT_LN_EPS):
    """Normalize each row to zero mean / unit population variance, then
    scale by ``gamma`` and shift by ``beta``."""
    x = as_matrix(x)
    d = x.shape[1]
    if d < 1:
        raise ShapeError("layer_norm: rows must have at least one element")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    gamma = as_vector(gamma, d, "gamma").astype(np.float64)
    beta = as_vector(beta, d, "beta").astype(np.float64)
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    centered = x64 - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    return (centered / np.sqrt(var + eps) * gamma + beta).astype(DTYPE)


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction."""
    m = as_matrix(m).astype(np.float64)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x64 = np.asarray(x, dtype=np.float64)
    return (0.5 * x64 * (1.0 + erf(x64 / np.sqrt(2.0)))).astype(DTYPE)
