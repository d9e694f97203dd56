"""Dense-tensor linear algebra primitives.

Tensors are plain numpy float arrays.  The one global convention is the
linearization order: ``vec`` flattens with the first mode fastest
(column-major), so that ``vec(v_1 o ... o v_M) = v_M (x) ... (x) v_1``
holds exactly and mode unfoldings follow the usual Kolda layout.
"""

from __future__ import annotations

import warnings
from functools import reduce
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "EigenPair",
    "vec",
    "unvec",
    "mode_unfold",
    "mode_multiply",
    "inner",
    "outer",
    "kronecker",
    "khatri_rao",
    "sym_eig",
    "ridge_solve",
    "flatten_samples",
]


class NumericalError(RuntimeError):
    """Raised when an iterative routine breaks down numerically."""


class EigenPair(NamedTuple):
    values: np.ndarray   # descending
    vectors: np.ndarray  # orthonormal columns, same order


def _as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim < 1:
        raise ValueError("tensor must have at least one mode")
    return a


# ---------------------------------------------------------------------------
# vectorization and unfoldings
# ---------------------------------------------------------------------------

def vec(x) -> np.ndarray:
    """Column-major flattening: entry (i_1,..,i_M) lands at i_1 + I_1*(i_2 + I_2*(...))."""
    return _as_tensor(x).reshape(-1, order="F")


def unvec(v, shape) -> np.ndarray:
    """Inverse of :func:`vec` for the given mode sizes."""
    v = np.asarray(v, dtype=float)
    if v.size != int(np.prod(shape)):
        raise ValueError(f"cannot reshape length {v.size} into {tuple(shape)}")
    return v.reshape(shape, order="F")


def mode_unfold(x, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization (0-based), Kolda ordering consistent with vec."""
    x = _as_tensor(x)
    if not 0 <= mode < x.ndim:
        raise ValueError(f"mode {mode} out of range for a {x.ndim}-mode tensor")
    return np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1, order="F")


def mode_multiply(x, mat, mode: int) -> np.ndarray:
    """Mode-``mode`` product x  x_mode  mat, i.e. mat applied to mode-``mode`` fibers."""
    x = _as_tensor(x)
    mat = np.asarray(mat, dtype=float)
    if not 0 <= mode < x.ndim:
        raise ValueError(f"mode {mode} out of range for a {x.ndim}-mode tensor")
    if mat.shape[1] != x.shape[mode]:
        raise ValueError(f"mode size mismatch: {mat.shape} vs {x.shape[mode]}")
    moved = np.tensordot(mat, x, axes=([1], [mode]))  # result mode sits at axis 0
    return np.moveaxis(moved, 0, mode)


def flatten_samples(covs) -> np.ndarray:
    """Stack a batch (n, I_1..I_M) into the n x prod(I_m) matrix whose rows are vec(X_i)."""
    covs = np.asarray(covs, dtype=float)
    n = covs.shape[0]
    rev = (0,) + tuple(range(covs.ndim - 1, 0, -1))
    return covs.transpose(rev).reshape(n, -1)


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------

def inner(x, y) -> float:
    """Tensor inner product <<x, y>> = <vec x, vec y>."""
    x = _as_tensor(x)
    y = _as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(vec(x), vec(y)))


def outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product of M vectors; entry (i_1,..,i_M) = prod_m v_m[i_m]."""
    vs = [np.asarray(v, dtype=float).ravel() for v in vectors]
    if not vs:
        raise ValueError("need at least one vector")
    return reduce(np.multiply.outer, vs)


def kronecker(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return np.kron(a, b)


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product; column j is a_j (x) b_j."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column count mismatch: {a.shape[1]} vs {b.shape[1]}")
    p, r = a.shape
    q = b.shape[0]
    return (a[:, None, :] * b[None, :, :]).reshape(p * q, r)


# ---------------------------------------------------------------------------
# symmetric eigendecomposition (cyclic Jacobi) and ridge solves
# ---------------------------------------------------------------------------

_JACOBI_SWEEPS = 100


def sym_eig(s, tol: float = 1e-8) -> EigenPair:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in non-increasing order (ties keep the Jacobi
    output order via a stable sort).  Eigenvalues below -tol*max(1,||s||)
    are flagged with a warning; the matrix is expected to be PSD up to
    round-off but this is not required.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    n = s.shape[0]
    scale = max(1.0, float(np.linalg.norm(s)))
    if float(np.max(np.abs(s - s.T), initial=0.0)) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")

    a = 0.5 * (s + s.T)
    v = np.eye(n)
    thresh = 1e-12 * float(np.linalg.norm(a))

    def _off_norm(mat):
        hollow = mat.copy()
        np.fill_diagonal(hollow, 0.0)
        return float(np.linalg.norm(hollow))

    converged = n < 2
    for _ in range(_JACOBI_SWEEPS):
        if _off_norm(a) <= thresh:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-36 * abs(diff):
                    t = apq / diff  # tiny off-diagonal: avoid overflow in theta
                else:
                    theta = diff / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) \
                        if theta != 0.0 else 1.0
                c = 1.0 / np.hypot(t, 1.0)
                sn = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - sn * rq
                a[q, :] = sn * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - sn * cq
                a[:, q] = sn * cp + c * cq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    else:
        converged = _off_norm(a) <= thresh
    if not converged:
        raise NumericalError(f"Jacobi did not converge within {_JACOBI_SWEEPS} sweeps")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = v[:, order]
    if values.size and values[-1] < -tol * scale:
        warnings.warn(
            f"eigenvalue {values[-1]:.3e} below -{tol:.1e}*scale; input may not be PSD",
            RuntimeWarning,
            stacklevel=2,
        )
    return EigenPair(values=values, vectors=vectors)


def ridge_solve(a, y, lam: float) -> np.ndarray:
    """argmin_w ||y - a w||^2 + lam ||w||^2 via the normal equations."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if a.shape[0] != y.size:
        raise ValueError(f"row count mismatch: {a.shape[0]} vs {y.size}")
    g = a.T @ a
    if lam > 0:
        g = g + lam * np.eye(a.shape[1])
    elif a.shape[1] > 0:
        sv = np.linalg.svd(g, compute_uv=False)
        if sv[0] == 0.0 or sv[-1] <= 1e-12 * sv[0]:
            raise NumericalError(
                "normal equations are numerically singular at lam=0; use lam > 0"
            )
    try:
        return np.linalg.solve(g, a.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"ridge solve failed: {exc}") from exc
