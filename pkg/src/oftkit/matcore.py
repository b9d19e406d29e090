"""Dense float64 matrix kernels.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major (C) order.
Layer weights are stored ``d x n`` with one neuron per column, so an
orthogonal transform acts on them from the left.
"""

import warnings

import numpy as np
import scipy.linalg

from .errors import DimensionError, NonFiniteError, SingularMatrixError, ZeroNormNeuron

ZERO_NORM = 1e-12
# smallest LU pivot, relative to the largest entry, that lu() accepts
_RCOND_MIN = 1e-14


def as_mat(a, name="matrix"):
    """Validate and convert ``a`` to a C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {np.shape(a)}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def lu(a):
    """Pivoted LU factorization of a square matrix, rejecting singular input."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix contains NaN or Inf")
    with warnings.catch_warnings():
        # singularity is reported below as SingularMatrixError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu_piv = scipy.linalg.lu_factor(a, check_finite=False)
    diag = np.abs(np.diag(lu_piv[0]))
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0 or diag.min() <= _RCOND_MIN * scale:
        raise SingularMatrixError("matrix is singular to working precision")
    return lu_piv


def lu_solve(lu_piv, b, trans=0):
    return scipy.linalg.lu_solve(lu_piv, b, trans=trans, check_finite=False)


def solve(a, b):
    """Return X with ``a @ X = b`` via partial-pivoting LU."""
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2) or b.shape[0] != a.shape[0]:
        raise DimensionError(f"cannot solve {np.shape(a)} system with rhs {b.shape}")
    return lu_solve(lu(a), b)


def column_norms(w):
    return np.sqrt(np.einsum("ij,ij->j", w, w))


def normalize_columns(w):
    w = np.asarray(w, dtype=np.float64)
    norms = column_norms(w)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroNormNeuron(f"column {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    return w / norms


def fro(a):
    return float(np.linalg.norm(a))
