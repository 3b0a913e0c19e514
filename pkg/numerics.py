"""
Linear-algebra and scalar utilities shared by every stage of the lab.

All functions are pure: they take numpy arrays (or sequences) and return new
values without touching their inputs.
"""

import zlib
import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from config import TOLERANCES
from errors import InvalidInputError, OracleFailureError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float]]


def as_matrix(M: ArrayLike) -> np.ndarray:
    """
    Validate and convert input to a finite 2-D float64 matrix.

    Raises:
        InvalidInputError: If the matrix is empty, not 2-D or has a non-finite entry
    """
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInputError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("matrix contains non-finite entries")
    return arr


def as_vector(v: ArrayLike) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("vector contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: R = left @ diag(singular_values) @ right.T"""

    left_singular_vectors: np.ndarray
    singular_values: np.ndarray
    right_singular_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_singular_vectors * self.singular_values) @ self.right_singular_vectors.T


def svd(R: ArrayLike) -> SvdResult:
    """
    Thin singular value decomposition with a deterministic sign convention.

    Each left-singular vector is flipped so its largest-magnitude entry is
    positive; the matching right-singular vector is flipped with it.

    Args:
        R: m x n matrix with finite entries

    Returns:
        SvdResult with min(m, n) singular triplets, values non-increasing
    """
    R = as_matrix(R)
    U, s, Vt = np.linalg.svd(R, full_matrices=False)
    V = Vt.T.copy()
    U = U.copy()

    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    V *= signs

    return SvdResult(left_singular_vectors=U, singular_values=s, right_singular_vectors=V)


def rank_for_energy(singular_values: ArrayLike, epsilon: float) -> int:
    """
    Smallest k whose leading singular values keep at least ``epsilon`` of the energy.

    Energy is the sum of squared singular values, so k satisfies
    ||R_k||_F^2 >= epsilon * ||R||_F^2.

    Raises:
        InvalidInputError: unsorted, negative or all-zero values; epsilon outside (0, 1]
    """
    s = as_vector(singular_values)
    if s.size == 0:
        raise InvalidInputError("no singular values given")
    if not 0.0 < epsilon <= 1.0:
        raise InvalidInputError(f"epsilon must lie in (0, 1], got {epsilon}")
    if np.any(s < 0):
        raise InvalidInputError("singular values must be non-negative")
    if np.any(np.diff(s) > TOLERANCES.sorted_values * max(1.0, float(s[0]))):
        raise InvalidInputError("singular values must be sorted non-increasing")

    energy = np.cumsum(s ** 2)
    total = energy[-1]
    if total <= 0:
        raise InvalidInputError("all singular values are zero")

    k = int(np.searchsorted(energy, epsilon * total, side="left")) + 1
    return min(k, s.size)


def softmax_weights(coefficients: ArrayLike) -> np.ndarray:
    """Softmax of a coefficient vector, computed with a max shift."""
    c = as_vector(coefficients)
    if c.size == 0:
        raise InvalidInputError("softmax of an empty coefficient vector")
    e = np.exp(c - c.max())
    return e / e.sum()


def cosine_similarity(u: ArrayLike, v: ArrayLike) -> float:
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise InvalidInputError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InvalidInputError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def frobenius_norm(M: ArrayLike) -> float:
    M = as_matrix(M)
    return float(np.sqrt(np.sum(M * M)))


def spectral_norm(M: ArrayLike) -> float:
    """Largest singular value."""
    M = as_matrix(M)
    return float(np.linalg.norm(M, ord=2))


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    x: ArrayLike,
    h: float = 1e-5
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar function of a parameter vector
        x: Point of evaluation
        h: Step size

    Returns:
        Vector of (f(x + h e_i) - f(x - h e_i)) / 2h

    Raises:
        OracleFailureError: If f returns a non-finite value
    """
    x = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x[i]
        x[i] = original + h
        f_plus = float(f(x.copy()))
        x[i] = original - h
        f_minus = float(f(x.copy()))
        x[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleFailureError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def is_orthonormal(B: ArrayLike, tol: float = TOLERANCES.orthonormality) -> bool:
    """True when the columns of B are orthonormal within ``tol``."""
    B = as_matrix(B)
    gram = B.T @ B
    return bool(np.max(np.abs(gram - np.eye(B.shape[1]))) <= tol)


def derive_seed(seed: int, *keys) -> int:
    """
    Deterministic child seed for (seed, key, key, ...).

    String keys are hashed with CRC32 so derived seeds are stable across
    processes (unlike ``hash``).
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, (int, np.integer)):
            entropy.append(int(key) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(key).encode("utf-8")))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def seeded_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
