"""One-sided (Hestenes) Jacobi kernel, compiled with numba."""

import numba
import numpy as np


@numba.njit(cache=True)
def hestenes_sweeps(A, V, tol, max_sweeps):
    """Orthogonalize the columns of ``A`` in place with cyclic plane rotations.

    ``V`` accumulates the same rotations. Returns ``(sweeps, off)`` where
    ``off`` is the largest relative column coupling seen in the last sweep;
    ``sweeps > max_sweeps`` signals non-convergence.
    """
    m, n = A.shape
    off = 0.0
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += A[k, i] * A[k, i]
                    beta += A[k, j] * A[k, j]
                    gamma += A[k, i] * A[k, j]
                if alpha == 0.0 or beta == 0.0:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    ai = A[k, i]
                    aj = A[k, j]
                    A[k, i] = c * ai - s * aj
                    A[k, j] = s * ai + c * aj
                for k in range(n):
                    vi = V[k, i]
                    vj = V[k, j]
                    V[k, i] = c * vi - s * vj
                    V[k, j] = s * vi + c * vj
        if not rotated:
            return sweep, off
    return max_sweeps + 1, off
