"""Pure-Python/NumPy fallback for the compiled Jacobi sweeps (same contract)."""
import math

import numpy as np


def jacobi_sweeps(at: np.ndarray, vt: np.ndarray, max_sweeps: int, tol: float):
    n = at.shape[0]
    sweep = 0
    off = 0.0
    while True:
        norms = np.einsum("ij,ij->i", at, at)
        total = float(norms.sum())
        if total == 0.0:
            off = 0.0
            break
        live = norms > 1e-28 * total
        sub = at[live]
        gram = sub @ sub.T
        d = norms[live]
        cos2 = np.triu(gram * gram / np.outer(d, d), 1)
        off = math.sqrt(float(cos2.sum()))
        if off < tol or sweep >= max_sweeps:
            break
        sweep += 1
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai = at[i]
                aj = at[j]
                alpha = float(ai @ ai)
                beta = float(aj @ aj)
                gamma = float(ai @ aj)
                if gamma == 0.0 or abs(gamma) <= 1e-300:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                xi = at[i].copy()
                at[i] = c * xi - s * at[j]
                at[j] = s * xi + c * at[j]
                vi = vt[i].copy()
                vt[i] = c * vi - s * vt[j]
                vt[j] = s * vi + c * vt[j]
    return sweep, off
