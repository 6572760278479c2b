"""Dense and sparse matrix primitives.

Dense matrices are 2-D ``numpy.ndarray`` objects (float64 unless configured
otherwise); sparse matrices are ``scipy.sparse.csr_matrix``.  Every function
returns a fresh array and leaves its inputs untouched.
"""

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ShapeError

DEFAULT_DTYPE = np.float64


def as_dense(a, dtype=None):
    """Coerce ``a`` to a 2-D floating array (a copy is not forced).

    Floating inputs keep their precision unless ``dtype`` is given; anything
    else becomes ``DEFAULT_DTYPE``.
    """
    arr = np.asarray(a)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got an array with ndim={arr.ndim}")
    return arr


def as_csr(s, dtype=None):
    if sp.issparse(s):
        return sp.csr_matrix(s, dtype=dtype or (s.dtype if np.issubdtype(s.dtype, np.floating) else DEFAULT_DTYPE))
    return sp.csr_matrix(as_dense(s, dtype))


def _check_inner(a_shape, b_shape):
    if a_shape[1] != b_shape[0]:
        raise ShapeError(f"inner dimensions differ: {a_shape} x {b_shape}")


def dense_matmul(a, b):
    a, b = as_dense(a), as_dense(b)
    _check_inner(a.shape, b.shape)
    return a @ b


def sparse_dense_matmul(s, d):
    """Product of a CSR matrix (p x q) with a dense matrix (q x k)."""
    if not sp.issparse(s):
        raise TypeError("sparse_dense_matmul expects a scipy.sparse matrix")
    d = as_dense(d)
    _check_inner(s.shape, d.shape)
    return np.asarray(s @ d)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(a, b, op):
    a, b = as_dense(a), as_dense(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def reduce(a, axis, op):
    """Sum or mean along ``axis`` (0 = over rows, 1 = over columns, None = all).

    The result keeps two dimensions: reducing over rows of an (n, k) matrix
    gives (1, k).
    """
    a = as_dense(a)
    if op == "sum":
        return a.sum(axis=axis, keepdims=True) if axis is not None else a.sum().reshape(1, 1)
    if op == "mean":
        if a.size == 0:
            raise ShapeError("mean of an empty matrix")
        return a.mean(axis=axis, keepdims=True) if axis is not None else a.mean().reshape(1, 1)
    raise ValueError(f"unknown reduction {op!r}")


def relu(a):
    return np.maximum(as_dense(a), 0.0)


def sigmoid(a):
    """Logistic function, evaluated without overflow for large |t|."""
    a = as_dense(a)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ez = np.exp(a[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(a):
    """log(1 + e^t), stable in both tails."""
    a = as_dense(a)
    return np.logaddexp(0.0, a)


def log(a):
    a = as_dense(a)
    if np.any(a <= 0):
        raise DomainError("log of a non-positive entry")
    return np.log(a)


def exp(a):
    return np.exp(as_dense(a))


_MAPS = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "softplus": softplus}


def map_elements(a, f):
    """Apply one of the named pointwise functions (relu, sigmoid, exp, log)."""
    try:
        fn = _MAPS[f]
    except KeyError:
        raise ValueError(f"unknown pointwise function {f!r}") from None
    return fn(a)


def densify(s):
    return np.asarray(s.toarray()) if sp.issparse(s) else as_dense(s).copy()
