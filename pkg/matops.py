"""
Matrix Operations
Dense float64 matrix helpers, a one-sided Jacobi SVD oracle and the Newton-Schulz orthogonalizer used by Muon
"""
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# A Matrix is a 2-D, C-contiguous float64 ndarray with finite entries.
Matrix = np.ndarray

DEFAULT_COEFFICIENTS = (3.4445, -4.7750, 2.0315)
CUBIC_COEFFICIENTS = (1.5, -0.5, 0.0)

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60

_HEADER = struct.Struct("<QQ")


class MatrixError(ValueError):
    """Raised for malformed or non-finite matrices"""


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Validate x and return it as a finite 2-D float64 array"""
    a = np.array(x, dtype=np.float64, order="C", copy=True)
    if a.ndim != 2:
        raise MatrixError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise MatrixError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise MatrixError(f"{name} has non-finite entries")
    return a


def max_norm(a: Matrix) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass(frozen=True)
class SvdResult:
    """Thin singular value decomposition a = u @ diag(s) @ v.T"""
    u: Matrix
    s: np.ndarray
    v: Matrix

    @property
    def k(self) -> int:
        return int(self.s.shape[0])

    def reconstruct(self) -> Matrix:
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class NewtonSchulzConfig:
    """Iteration count, normalization guard and polynomial coefficients"""
    steps: int = 5
    eps: float = 1e-7
    coefficients: Tuple[float, float, float] = DEFAULT_COEFFICIENTS

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise MatrixError(f"steps must be a positive integer, got {self.steps}")
        if not self.eps > 0:
            raise MatrixError(f"eps must be positive, got {self.eps}")
        if len(self.coefficients) != 3:
            raise MatrixError("coefficients must be a triple (a, b, c)")


@lru_cache(maxsize=None)
def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once per sweep"""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p_idx = np.array([p for p, _ in pairs], dtype=np.intp)
            q_idx = np.array([q for _, q in pairs], dtype=np.intp)
            rounds.append((p_idx, q_idx))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_columns(u: Matrix, deficient: np.ndarray) -> Matrix:
    """Replace columns flagged deficient with an orthonormal completion"""
    u = u.copy()
    m = u.shape[0]
    good = list(np.flatnonzero(~deficient))
    for j in np.flatnonzero(deficient):
        basis = u[:, good]
        best, best_norm = None, -1.0
        for i in range(m):
            e = np.zeros(m)
            e[i] = 1.0
            for _ in range(2):
                e = e - basis @ (basis.T @ e)
            norm = float(np.linalg.norm(e))
            if norm > best_norm:
                best, best_norm = e, norm
        u[:, j] = best / best_norm
        good.append(j)
    return u


def _jacobi_tall(a: Matrix) -> SvdResult:
    """One-sided Jacobi on a matrix with rows >= cols"""
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    for sweep in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p_idx, q_idx in rounds:
            ap, aq = work[:, p_idx], work[:, q_idx]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            work[:, p_idx], work[:, q_idx] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p_idx], v[:, q_idx]
            v[:, p_idx], v[:, q_idx] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            logger.debug("jacobi converged after %d sweeps", sweep + 1)
            break
    else:
        logger.warning("jacobi svd hit the %d sweep limit on a %dx%d matrix", JACOBI_MAX_SWEEPS, m, n)

    s = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-s, kind="stable")
    s, work, v = s[order], work[:, order], v[:, order]
    floor = s[0] * 1e-13 if s[0] > 0 else 0.0
    deficient = s <= floor
    u = work / np.where(deficient, 1.0, s)
    if np.any(deficient):
        s = np.where(deficient, 0.0, s)
        u = _complete_columns(u, deficient)
    return SvdResult(u=u, s=s, v=v)


def svd(a) -> SvdResult:
    """Singular value decomposition by cyclic one-sided Jacobi"""
    a = as_matrix(a, "svd input")
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a)
    r = _jacobi_tall(a.T)
    return SvdResult(u=r.v, s=r.s, v=r.u)


def singular_value_range(a) -> Tuple[float, float]:
    """(min, max) singular value according to the Jacobi oracle"""
    s = svd(a).s
    return float(s[-1]), float(s[0])


def polar_factor(a) -> Matrix:
    """Exact orthogonal factor U @ V.T"""
    r = svd(a)
    return r.u @ r.v.T


def newton_schulz(g, cfg: NewtonSchulzConfig = NewtonSchulzConfig()) -> Matrix:
    """Approximate U @ V.T with a fixed-coefficient polynomial iteration"""
    x = as_matrix(g, "gradient")
    a, b, c = cfg.coefficients
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    x = x / (np.linalg.norm(x) + cfg.eps)
    for _ in range(cfg.steps):
        gram = x @ x.T
        x = a * x + (b * gram + c * gram @ gram) @ x
    if transposed:
        x = x.T
    return np.ascontiguousarray(x)


# Serialization

def matrix_to_bytes(a) -> bytes:
    a = as_matrix(a)
    return _HEADER.pack(*a.shape) + a.astype("<f8").tobytes(order="C")


def matrix_from_bytes(blob: bytes) -> Matrix:
    if len(blob) < _HEADER.size:
        raise MatrixError("truncated matrix header")
    rows, cols = _HEADER.unpack_from(blob)
    expected = _HEADER.size + 8 * rows * cols
    if len(blob) != expected:
        raise MatrixError(f"matrix payload has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    return as_matrix(data.reshape(rows, cols))


def write_matrix(path: Union[str, Path], a) -> None:
    Path(path).write_bytes(matrix_to_bytes(a))


def read_matrix(path: Union[str, Path]) -> Matrix:
    return matrix_from_bytes(Path(path).read_bytes())


def write_matrix_csv(path: Union[str, Path], a) -> None:
    np.savetxt(path, as_matrix(a), delimiter=",", fmt="%.17g")


def read_matrix_csv(path: Union[str, Path]) -> Matrix:
    return as_matrix(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))
