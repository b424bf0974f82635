"""Deterministic one-sided Jacobi SVD for small dense matrices.

The rotation sweeps run in a compiled kernel when the extension is built and
fall back to a NumPy implementation otherwise. Set ``QTUNING_PURE_PYTHON=1``
to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError, InvalidInputError, NumericalFailureError

if os.environ.get("QTUNING_PURE_PYTHON"):
    from ._jacobi_py import jacobi_sweeps
    BACKEND = "python"
else:
    try:
        from ._jacobi import jacobi_sweeps
        BACKEND = "cython"
    except ImportError:  # extension not built
        from ._jacobi_py import jacobi_sweeps
        BACKEND = "python"

MAX_SWEEPS = 60
OFF_TOL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with ``k = min(m, n)``."""

    u: np.ndarray  # m x k, orthonormal columns
    sigma: np.ndarray  # k, descending, >= 0
    vt: np.ndarray  # k x n, orthonormal rows

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _complete_basis(cols: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns not flagged in ``keep`` by an orthonormal completion.

    Candidates are the standard basis vectors in index order, so the result is
    deterministic. Two Gram-Schmidt passes per candidate.
    """
    p, q = cols.shape
    out = cols.copy()
    basis = [out[:, j] for j in range(q) if keep[j]]
    candidates = iter(range(p))
    for j in range(q):
        if keep[j]:
            continue
        while True:
            e = np.zeros(p)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                break
        out[:, j] = e
        basis.append(e)
    return out


def svd(a) -> SvdResult:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"svd needs a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("svd input contains NaN or Inf")
    m, n = a.shape
    transposed = m < n
    work = a.T if transposed else a  # p x q with p >= q
    p, q = work.shape
    at = np.array(work.T, order="C", copy=True)
    rot = np.eye(q)
    sweeps, off = jacobi_sweeps(at, rot, MAX_SWEEPS, OFF_TOL)
    if off >= OFF_TOL:
        raise NumericalFailureError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps for a {m}x{n} matrix (off={off:.3e})"
        )
    norms = np.sqrt(np.einsum("ij,ij->i", at, at))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    right = rot[order]  # rows: right singular vectors of ``work``
    cols = at[order].T  # p x q, column j = sigma_j * left vector
    # numerically-zero directions get an exact zero and a completed basis vector
    keep = sigma > 1e-13 * np.sqrt(np.sum(sigma * sigma))
    left = np.zeros_like(cols)
    left[:, keep] = cols[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    left = _complete_basis(left, keep)
    if transposed:
        u, vt = right.T, left.T
    else:
        u, vt = left, right
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    # largest-magnitude entry of each right vector is positive (first index on ties)
    pivots = np.argmax(np.abs(vt), axis=1)
    signs = np.where(vt[np.arange(vt.shape[0]), pivots] < 0, -1.0, 1.0)
    vt *= signs[:, None]
    u *= signs[None, :]
    return SvdResult(u=u, sigma=sigma, vt=vt)


def truncate_rank(s: SvdResult, k: int) -> np.ndarray:
    """Rows ``sigma[i] * vt[i]`` for the top ``k`` components."""
    if not 1 <= k <= len(s.sigma):
        raise InvalidArgumentError(f"k={k} outside [1, {len(s.sigma)}]")
    return s.sigma[:k, None] * s.vt[:k]
