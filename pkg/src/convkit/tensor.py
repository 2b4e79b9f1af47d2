"""Dense 4-D tensor plumbing and the GEMM kernel the engine is built on.

Tensors are plain numpy arrays in NCHW layout (batch, channels, height,
width), C-contiguous, 32-bit floats on the production path.  A 64-bit
shadow dtype exists solely so gradient checks are not drowned in rounding
noise.  GEMM is delegated to numpy's BLAS backend; the triple-loop
reference lives in the test suite, never here.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NumericError

FLOAT = np.float32
SHADOW_FLOAT = np.float64


def tensor4d(data, shape=None, dtype=FLOAT) -> np.ndarray:
    """Build an NCHW tensor from array-like data, validating the shape."""
    t = np.ascontiguousarray(data, dtype=dtype)
    if shape is not None:
        if int(np.prod(shape)) != t.size:
            raise DimensionMismatch(
                f"cannot view {t.size} elements as shape {tuple(shape)}"
            )
        t = t.reshape(shape)
    if t.ndim != 4:
        raise DimensionMismatch(f"expected a 4-d tensor, got shape {t.shape}")
    if any(s < 0 for s in t.shape):
        raise DimensionMismatch(f"negative dimension in shape {t.shape}")
    return t


def reshape_view(t: np.ndarray, new_shape) -> np.ndarray:
    """Reinterpret ``t`` with a new 4-tuple shape; element count must match."""
    new_shape = tuple(int(s) for s in new_shape)
    if len(new_shape) != 4:
        raise DimensionMismatch(f"new shape must have 4 dims, got {new_shape}")
    if int(np.prod(new_shape)) != t.size:
        raise DimensionMismatch(
            f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}"
        )
    return np.ascontiguousarray(t).reshape(new_shape)


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {a.shape}")
    return a


def gemm(a, b, trans_a=False, trans_b=False, alpha=1.0, beta=0.0, c=None) -> np.ndarray:
    """c <- alpha * op(a) @ op(b) + beta * c.

    ``op`` transposes its operand when the corresponding flag is set.  When
    ``c`` is omitted a zero matrix of the result shape is implied (and
    ``beta`` is irrelevant).  Returns the result matrix; when ``c`` is given
    it is updated in place and returned.
    """
    a = _as_matrix(a)
    b = _as_matrix(b)
    op_a = a.T if trans_a else a
    op_b = b.T if trans_b else b
    if op_a.shape[1] != op_b.shape[0]:
        raise DimensionMismatch(
            f"gemm inner dims disagree: op(a) is {op_a.shape}, op(b) is {op_b.shape}"
        )
    out_shape = (op_a.shape[0], op_b.shape[1])
    prod = np.matmul(op_a, op_b)
    if alpha != 1.0:
        prod = prod * prod.dtype.type(alpha)
    if c is None:
        return np.ascontiguousarray(prod)
    c = _as_matrix(c)
    if c.shape != out_shape:
        raise DimensionMismatch(
            f"gemm output shape {out_shape} does not match c shape {c.shape}"
        )
    if beta == 0.0:
        c[...] = prod
    else:
        c *= c.dtype.type(beta)
        c += prod
    return c


def check_finite(a: np.ndarray, context: str = "tensor") -> np.ndarray:
    """Raise unless every value is finite; used by the engine's checked mode."""
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NumericError(f"{context}: {bad} non-finite value(s) produced")
    return a
