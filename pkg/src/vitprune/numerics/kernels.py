"""Dense array kernels with fixed accumulation order.

All kernels take and return plain ``numpy.ndarray`` objects.  Matrix products
go through numba-compiled loops that accumulate each output element in
increasing ``k`` order without fused multiply-add, so results are
bit-identical to a naive triple loop and independent of how the output is
partitioned (per head, per batch element, fused).
"""

import math

import numpy as np
from numba import njit
from scipy.special import erfc

from ..errors import ContractError, DimensionError, NonFiniteError

# python floats: numpy scalars would promote float32 arrays to float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _mm_into(out, a, b):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


@njit(cache=True)
def _bmm_into(out, a, b):
    nb, m, k = a.shape
    n = b.shape[2]
    for t in range(nb):
        for i in range(m):
            for p in range(k):
                aip = a[t, i, p]
                for j in range(n):
                    out[t, i, j] += aip * b[t, p, j]


def check_finite(a, where="kernel"):
    """Raise :class:`NonFiniteError` if ``a`` holds NaN or Inf."""
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values encountered in {where}")
    return a


def _result_dtype(a, b):
    return np.result_type(a.dtype, b.dtype, np.float32)


def matmul_into(out, a, b):
    """Accumulate ``a @ b`` into ``out`` in place (2-D operands only).

    Accumulating several products into the same buffer continues the same
    k-ordered sum, so ``matmul_into(out, a[:, :r], b[:r]); matmul_into(out,
    a[:, r:], b[r:])`` is bit-identical to ``matmul(a, b)``.
    """
    if a.ndim != 2 or b.ndim != 2 or out.ndim != 2:
        raise DimensionError("matmul_into expects 2-D operands")
    if a.shape[1] != b.shape[0] or out.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(
            f"matmul_into shape mismatch: {out.shape} += {a.shape} @ {b.shape}")
    if not out.flags.c_contiguous:
        raise ContractError("matmul_into needs a C-contiguous output buffer")
    dt = out.dtype
    _mm_into(out, np.ascontiguousarray(a, dtype=dt), np.ascontiguousarray(b, dtype=dt))
    return check_finite(out, "matmul")


def matmul(a, b):
    """Matrix product with deterministic k-ordered accumulation.

    Supports 2-D operands and stacks of matrices with identical leading
    dimensions (``(..., m, k) @ (..., k, n)``).

    Raises
    ------
    DimensionError
        If inner dimensions or batch dimensions disagree.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"batch dimensions disagree: {a.shape[:-2]} vs {b.shape[:-2]}")
    check_finite(a, "matmul")
    check_finite(b, "matmul")
    dt = _result_dtype(a, b)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = a.shape[:-2]
    if not batch:
        out = np.zeros((m, n), dtype=dt)
        _mm_into(out, np.ascontiguousarray(a, dtype=dt), np.ascontiguousarray(b, dtype=dt))
        return check_finite(out, "matmul")
    nb = int(np.prod(batch))
    out = np.zeros((nb, m, n), dtype=dt)
    _bmm_into(out,
              np.ascontiguousarray(a, dtype=dt).reshape(nb, m, k),
              np.ascontiguousarray(b, dtype=dt).reshape(nb, k, n))
    return check_finite(out.reshape(*batch, m, n), "matmul")


def softmax_rows(a):
    """Softmax along the last axis with max subtraction."""
    a = check_finite(np.asarray(a), "softmax_rows")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Returns the output together with the cached ``(xhat, inv_std)`` needed
    for the backward pass.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    a = check_finite(np.asarray(a), "layer_norm")
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shape {gain.shape}/{bias.shape} vs input {a.shape}")
    mean = a.mean(axis=-1, keepdims=True)
    centered = a - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def gelu(a):
    """Exact-erf GELU, ``x * Phi(x)``.

    ``Phi`` is evaluated as ``erfc(-x / sqrt 2) / 2``, which equals
    ``(1 + erf(x / sqrt 2)) / 2`` without the cancellation for negative ``x``.
    """
    a = check_finite(np.asarray(a), "gelu")
    return 0.5 * a * erfc(-a / _SQRT2)


def gelu_grad(a):
    """Derivative of :func:`gelu`: ``Phi(x) + x * phi(x)``."""
    cdf = 0.5 * erfc(-a / _SQRT2)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    return cdf + a * pdf


def log_softmax_rows(a):
    a = check_finite(np.asarray(a), "log_softmax_rows")
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of the true class.

    Raises
    ------
    IndexError
        If any label is outside ``[0, C)``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy_loss expects logits of shape (B, C)")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    logp = log_softmax_rows(logits)
    picked = logp[np.arange(labels.shape[0]), labels.astype(np.intp)]
    return float(-picked.mean())
