"""Exact solutions of the linear SSL objective and subspace diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .datagen import LocalDataset
from .objectives import LinearEncoder

RANK_TOL = 1e-10


@dataclass
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


@dataclass
class RepresentabilityVector:
    values: np.ndarray
    subspace_dim: int
    directions: np.ndarray | None = None

    def __getitem__(self, i):
        return self.values[i]


def empirical_covariance(dataset: LocalDataset | np.ndarray) -> np.ndarray:
    """Uncentered second moment ``(1/n) sum_i x_i x_i^T``."""
    x = dataset.samples if isinstance(dataset, LocalDataset) else np.atleast_2d(np.asarray(dataset, float))
    if x.shape[0] == 0:
        raise ValueError("cannot take the covariance of an empty dataset")
    return x.T @ x / x.shape[0]


def global_covariance(datasets: Sequence[LocalDataset]) -> np.ndarray:
    """Size-weighted mixture ``sum_k |D_k|/|D| X_k`` of local covariances."""
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise ValueError(f"datasets disagree on dimension: {sorted(dims)}")
    total = sum(len(ds) for ds in datasets)
    if total == 0:
        raise ValueError("union of datasets is empty")
    out = np.zeros((dims.pop(),) * 2)
    for ds in datasets:
        if len(ds):
            out += (len(ds) / total) * empirical_covariance(ds)
    return out


def _check_symmetric(X, tol: float = 1e-10) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {X.shape}")
    scale = max(1.0, np.abs(X).max(initial=0.0))
    if np.abs(X - X.T).max(initial=0.0) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (X + X.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive; first index wins ties
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _descending(values: np.ndarray, vectors: np.ndarray):
    # LAPACK returns ascending order; a stable sort on the negated values
    # keeps tied eigenpairs in their original relative order
    order = np.argsort(-values, kind="stable")
    return values[order], _fix_signs(vectors[:, order])


def symmetric_eig(X) -> EigenSystem:
    """Full eigendecomposition with descending eigenvalues and a fixed sign convention."""
    X = _check_symmetric(X)
    values, vectors = scipy.linalg.eigh(X)
    values, vectors = _descending(values, vectors)
    return EigenSystem(values, vectors)


def top_eigenpairs(X, m: int) -> EigenSystem:
    """The ``m`` largest eigenpairs only; cheaper than :func:`symmetric_eig` for large ``d``."""
    X = _check_symmetric(X)
    d = X.shape[0]
    if not 1 <= m <= d:
        raise ValueError(f"m={m} must lie in [1, {d}]")
    values, vectors = scipy.linalg.eigh(X, subset_by_index=[d - m, d - 1])
    values, vectors = _descending(values, vectors)
    return EigenSystem(values, vectors)


def ssl_minimizer_oracle(X, m: int, psd_tol: float = 1e-8) -> LinearEncoder:
    """Global minimizer of the linear SSL loss: rows ``sqrt(lambda_i) v_i`` of the top-m eigenpairs."""
    X = _check_symmetric(X)
    d = X.shape[0]
    if m > d:
        raise ValueError(f"m={m} exceeds d={d}")
    system = top_eigenpairs(X, m)
    values = system.eigenvalues
    scale = max(1.0, abs(float(values[0])))
    if values.min() < -psd_tol * scale:
        raise ValueError(f"covariance is not PSD (eigenvalue {values.min():.3g})")
    values = np.clip(values, 0.0, None)
    return LinearEncoder(np.sqrt(values)[:, None] * system.eigenvectors.T)


def orthonormal_row_basis(A, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as columns) of the row span of ``A`` via pivoted QR."""
    A = A.weight if isinstance(A, LinearEncoder) else np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0 or not np.any(A):
        return np.zeros((A.shape[1], 0))
    q, r, _ = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * diag[0]))
    return q[:, :rank]


def representability(basis_or_encoder, directions=None) -> RepresentabilityVector:
    """Squared norms of the projections of ``e_i`` onto the row span.

    Returns the full length-d vector when ``directions`` is empty or None.
    """
    basis = orthonormal_row_basis(basis_or_encoder)
    r = np.sum(basis ** 2, axis=1)
    if directions is not None and len(directions):
        idx = np.asarray(directions, dtype=np.int64)
        return RepresentabilityVector(r[idx], basis.shape[1], idx)
    return RepresentabilityVector(r, basis.shape[1])


def principal_angle(A, B) -> float:
    """Largest principal angle (radians) between the row spans of ``A`` and ``B``.

    Spans of different dimension are never equal; the extra directions are
    orthogonal to the smaller span, so the result is pi/2.
    """
    qa, qb = orthonormal_row_basis(A), orthonormal_row_basis(B)
    if qa.shape[1] == 0 or qb.shape[1] == 0:
        raise ValueError("principal angle needs two non-zero spans")
    if qa.shape[1] != qb.shape[1]:
        return float(np.pi / 2)
    # arcsin of the residual is accurate for small angles where arccos is not
    residual = qb - qa @ (qa.T @ qb)
    s = np.linalg.norm(residual, 2)
    return float(np.arcsin(min(1.0, s)))
