import logging
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg as sla
from sklearn.decomposition import PCA

from models.errors import (
    DegenerateSpread,
    DimensionMismatch,
    EmptyInput,
    NotPositiveDefinite,
    NotSymmetric,
)

logger = logging.getLogger(__name__)

# Dense float64 arrays stand in for the Matrix/Vector types: 2-D row-major
# for matrices, 1-D for vectors.
Matrix = NDArray[np.float64]
Vector = NDArray[np.float64]

SYMMETRY_RTOL = 1e-9


def as_vector(values: ArrayLike, name: str = "vector") -> Vector:
    """
    Convert input to a finite float64 vector.

    Args:
        values: Anything numpy can turn into a 1-D array
        name: Label used in error messages

    Returns:
        A contiguous float64 copy
    """
    vec = np.array(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} contains non-finite entries")
    return vec


def as_matrix(values: ArrayLike, name: str = "matrix") -> Matrix:
    """
    Convert input to a finite float64 matrix.

    Args:
        values: Anything numpy can turn into a 2-D array
        name: Label used in error messages

    Returns:
        A contiguous float64 copy
    """
    mat = np.array(values, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} contains non-finite entries")
    return mat


def check_symmetric(A: Matrix, rtol: float = SYMMETRY_RTOL) -> None:
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got shape {A.shape}")
    scale = max(float(np.max(np.abs(A))), 1.0) if A.size else 1.0
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > rtol * scale:
        raise NotSymmetric(f"matrix asymmetry {asym:.3e} exceeds {rtol:.0e} relative tolerance")


def solve_spd(A: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """
    Solve A x = b for symmetric positive-definite A via a Cholesky factorization.

    One step of iterative refinement is applied, which keeps the relative
    residual at round-off level for the ill-conditioned second moments the
    editor works with. No explicit inverse is ever formed.

    Args:
        A: Symmetric positive-definite matrix (n x n)
        b: Right-hand side, a vector of length n or an (n x k) block

    Returns:
        Solution with the same shape as b
    """
    A = as_matrix(A, "A")
    b = np.array(b, dtype=np.float64)
    check_symmetric(A)
    if b.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"A is {A.shape} but b has leading dimension {b.shape[0]}")

    try:
        factor = sla.cho_factor(A, lower=True, check_finite=True)
    except sla.LinAlgError as e:
        raise NotPositiveDefinite(f"Cholesky factorization failed: {e}") from e

    x = sla.cho_solve(factor, b)
    x = x + sla.cho_solve(factor, b - A @ x)
    return x


def outer(u: ArrayLike, v: ArrayLike) -> Matrix:
    """Outer product u vᵀ."""
    return np.outer(as_vector(u, "u"), as_vector(v, "v"))


def frobenius_norm(M: ArrayLike) -> float:
    M = np.asarray(M, dtype=np.float64)
    return float(np.sqrt(np.sum(M * M)))


def cosine(u: Vector, v: Vector) -> float:
    """Cosine similarity; zero when either vector vanishes."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def pca_project(
    points: Union[Sequence[ArrayLike], NDArray[np.float64]],
    target_dim: int = 2,
) -> Matrix:
    """
    Project points onto their top principal axes.

    Axes are the eigenvectors of the sample covariance in descending
    eigenvalue order. Each axis is signed so that its largest-magnitude
    loading is positive, which makes the layout reproducible across runs.

    Args:
        points: Sequence of equal-length vectors
        target_dim: Number of principal axes to keep

    Returns:
        Array of shape (len(points), target_dim) with the projected coordinates
    """
    if len(points) == 0:
        raise EmptyInput("pca_project needs at least one point")
    X = np.array([as_vector(p, "point") for p in points]) if not isinstance(points, np.ndarray) \
        else as_matrix(points, "points")
    n_points, dim = X.shape
    if target_dim < 1 or n_points < target_dim + 1 or target_dim > dim:
        raise DimensionMismatch(
            f"cannot project {n_points} points of dimension {dim} onto {target_dim} axes"
        )
    if np.all(X == X[0]):
        raise DegenerateSpread("all points are identical")

    pca = PCA(n_components=target_dim, svd_solver="full")
    pca.fit(X)
    axes = pca.components_.copy()

    for i in range(target_dim):
        pivot = int(np.argmax(np.abs(axes[i])))
        if axes[i, pivot] < 0:
            axes[i] = -axes[i]

    return (X - X.mean(axis=0)) @ axes.T
