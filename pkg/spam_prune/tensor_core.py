"""
Dense matrix helpers shared by every other module.

Convention used throughout the package: a layer's weight matrix W has shape
(out_dim, in_dim), so row j holds the weights feeding unit j and column i
holds the weights leaving input i. ``vec`` stacks columns (Fortran order):
the weight from input i to unit j sits at flat position ``i * out_dim + j``.
With this convention ``(A ⊗ G) vec(X) = vec(G X Aᵀ)`` where A acts on the
input side and G on the output side, which is the identity KFAC relies on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .const import KRON_MAX_ENTRIES, SYMMETRY_TOLERANCE
from .errors import NumericalError, StructuralError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix.

    Attributes:
        eigenvalues: Ascending eigenvalues.
        eigenvectors: Orthonormal eigenvectors stored as columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        """Return Q diag(λ) Qᵀ."""
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def as_matrix(m) -> np.ndarray:
    """Return ``m`` as a 2-D float64 array, rejecting other ranks."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise StructuralError(f"Expected a matrix, got an array of rank {arr.ndim}")
    return arr


def sym_eig(m) -> SymEig:
    """
    Eigendecompose a symmetric matrix.

    Args:
        m: Square matrix, symmetric to within 1e-10 (scaled by its largest
            entry when that exceeds one).

    Returns:
        SymEig with ascending eigenvalues and orthonormal eigenvectors.

    Raises:
        StructuralError: Input is not square or not symmetric.
        NumericalError: The eigensolver did not converge.
    """
    arr = as_matrix(m)
    rows, cols = arr.shape
    if rows != cols:
        raise StructuralError(f"sym_eig needs a square matrix, got {rows}x{cols}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"sym_eig input of dimension {rows} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(arr)))) if arr.size else 1.0
    asymmetry = float(np.max(np.abs(arr - arr.T))) if arr.size else 0.0
    if asymmetry > SYMMETRY_TOLERANCE * scale:
        raise StructuralError(
            f"sym_eig needs a symmetric matrix, max asymmetry {asymmetry:.3e}"
        )
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (arr + arr.T))
    except np.linalg.LinAlgError as err:
        raise NumericalError(
            f"Eigendecomposition of a {rows}x{rows} matrix did not converge: {err}",
            {"dimension": rows},
        ) from err
    return SymEig(eigenvalues=eigenvalues, eigenvectors=eigenvectors)


def kron(a, b) -> np.ndarray:
    """Kronecker product with a guard against huge results."""
    a = as_matrix(a)
    b = as_matrix(b)
    entries = a.shape[0] * b.shape[0] * a.shape[1] * b.shape[1]
    if entries > KRON_MAX_ENTRIES:
        raise StructuralError(
            f"Kronecker product of {a.shape} and {b.shape} has {entries} entries"
        )
    return np.kron(a, b)


def vec(m) -> np.ndarray:
    """Stack the columns of ``m`` into a vector."""
    return as_matrix(m).ravel(order="F")


def mat(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`: refill a ``rows`` x ``cols`` matrix column by column."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size != rows * cols:
        raise StructuralError(
            f"Cannot reshape a vector of length {arr.size} into {rows}x{cols}"
        )
    return arr.reshape((rows, cols), order="F")


def kron_mat_vec(a, b, v) -> np.ndarray:
    """Compute (a ⊗ b) v as vec(b · mat(v) · aᵀ) without forming the product."""
    a = as_matrix(a)
    b = as_matrix(b)
    arr = np.asarray(v, dtype=np.float64)
    expected = a.shape[1] * b.shape[1]
    if arr.ndim != 1 or arr.size != expected:
        raise StructuralError(
            f"kron_mat_vec needs a vector of length {expected}, got {arr.size}"
        )
    return vec(b @ mat(arr, b.shape[1], a.shape[1]) @ a.T)


def make_rng(seed: int) -> np.random.Generator:
    """Return a reproducible generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generators for parallel work, derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """Raise NumericalError if ``arr`` holds NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{what} has {bad} non-finite entries", {"non_finite": bad})
    return arr
