"""Dense SVD and the spectral metrics built on it.

Every function here is pure: inputs are never modified and nothing is cached.
Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sosd._jacobi import hestenes_sweeps

__all__ = [
    "ConvergenceError",
    "DegenerateSpectrumError",
    "NormBundle",
    "SpectralSnapshot",
    "as_matrix",
    "cosine_similarity",
    "matrix_norms",
    "sd_variation",
    "snapshot",
    "svd",
    "trace_normalize",
]

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60
COND_CUTOFF = 1e-14


class ConvergenceError(RuntimeError):
    """Jacobi sweeps did not converge within the sweep budget."""

    def __init__(self, sweeps: int, residual: float):
        super().__init__(
            f"one-sided Jacobi did not converge in {sweeps} sweeps "
            f"(largest relative column coupling {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


class DegenerateSpectrumError(ValueError):
    """Raised when a spectrum has zero trace, so its distribution is undefined."""


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float64 array or raise ``ValueError``."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


@dataclass(frozen=True)
class SpectralSnapshot:
    """Sorted singular values of one matrix plus their trace."""

    singular_values: np.ndarray
    trace: float = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("singular_values must be 1-D")
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular_values must be nonnegative and sorted descending")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "singular_values", s)
        object.__setattr__(self, "trace", float(s.sum()))

    def __len__(self):
        return len(self.singular_values)

    @property
    def distribution(self) -> np.ndarray:
        return trace_normalize(self)


@dataclass(frozen=True)
class NormBundle:
    frobenius: float
    nuclear: float
    spectral: float
    condition_number: float  # math.inf when flagged singular
    rank: int

    @property
    def singular(self) -> bool:
        return np.isinf(self.condition_number)


def _complete_orthonormal(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``U`` not in ``keep`` by an orthonormal completion."""
    m, k = U.shape
    basis = [U[:, j] for j in range(k) if keep[j]]
    out = U.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            # two Gram-Schmidt passes for stability
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                basis.append(v)
                out[:, j] = v
                break
    return out


def svd(M) -> tuple[np.ndarray, SpectralSnapshot, np.ndarray]:
    """Thin SVD ``M = U @ diag(s) @ V.T`` by one-sided Jacobi.

    Returns ``(U, snapshot, V)`` with ``U`` of shape (m, k), ``V`` of shape
    (n, k), k = min(m, n), and singular values sorted descending. Equal
    singular values keep the order Jacobi produced them in.
    """
    A = as_matrix(M)
    m, n = A.shape
    transposed = m < n
    if transposed:
        A = A.T
        m, n = n, m
    work = np.array(A, dtype=np.float64, order="C", copy=True)
    V = np.eye(n)
    sweeps, off = hestenes_sweeps(work, V, JACOBI_TOL, MAX_SWEEPS)
    if sweeps > MAX_SWEEPS:
        raise ConvergenceError(MAX_SWEEPS, off)

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    V = V[:, order]

    scale = sigma[0] if sigma[0] > 0 else 1.0
    keep = sigma > 1e-15 * scale
    U = np.zeros_like(work)
    U[:, keep] = work[:, keep] / sigma[keep]
    if not np.all(keep):
        U = _complete_orthonormal(U, keep)
        sigma = np.where(keep, sigma, 0.0)

    snap = SpectralSnapshot(sigma)
    if transposed:
        return V, snap, U
    return U, snap, V


def snapshot(M) -> SpectralSnapshot:
    """Singular values of ``M`` only."""
    return svd(M)[1]


def trace_normalize(snap: SpectralSnapshot) -> np.ndarray:
    """Singular values divided by their sum (the singular distribution)."""
    if not snap.trace > 0:
        raise DegenerateSpectrumError("zero-trace spectrum has no distribution")
    return snap.singular_values / snap.trace


def _as_snapshot(x) -> SpectralSnapshot:
    if isinstance(x, SpectralSnapshot):
        return x
    return snapshot(x)


def sd_variation(a, b) -> float:
    """Euclidean distance between the singular distributions of ``a`` and ``b``.

    Either argument may be a ``SpectralSnapshot`` or a matrix.
    """
    sa, sb = _as_snapshot(a), _as_snapshot(b)
    if len(sa) != len(sb):
        raise ValueError(f"spectrum lengths differ: {len(sa)} vs {len(sb)}")
    return float(np.linalg.norm(trace_normalize(sa) - trace_normalize(sb)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b`` viewed as flat vectors."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for a zero operand")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def norms_from_snapshot(snap: SpectralSnapshot) -> NormBundle:
    s = snap.singular_values
    smax = float(s[0])
    smin = float(s[-1])
    if smax == 0 or smin < COND_CUTOFF * smax:
        cond = np.inf
    else:
        cond = smax / smin
    rank = int(np.sum(s > COND_CUTOFF * smax)) if smax > 0 else 0
    return NormBundle(
        frobenius=float(np.sqrt(np.sum(s * s))),
        nuclear=float(s.sum()),
        spectral=smax,
        condition_number=cond,
        rank=rank,
    )


def matrix_norms(M) -> NormBundle:
    """Frobenius, nuclear and spectral norms plus condition number, from the SVD."""
    return norms_from_snapshot(snapshot(M))
