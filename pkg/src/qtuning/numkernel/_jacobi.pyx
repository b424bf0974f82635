# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi sweeps.

Columns of the working matrix are stored as rows of ``at`` (n x m, C-contiguous)
so every rotation touches two contiguous rows.
"""
from cython cimport view
from libc.math cimport sqrt, fabs


cdef inline double _dot(double[:, ::1] a, Py_ssize_t i, Py_ssize_t j) nogil:
    cdef Py_ssize_t k
    cdef double s = 0.0
    for k in range(a.shape[1]):
        s += a[i, k] * a[j, k]
    return s


def jacobi_sweeps(double[:, ::1] at, double[:, ::1] vt, int max_sweeps, double tol):
    """Orthogonalize the rows of ``at`` in place, accumulating rotations in ``vt``.

    Returns ``(sweeps, off)`` where ``off`` is the Frobenius mass of the
    off-diagonal part of the normalized Gram matrix (column cosines), measured
    after the last sweep. Columns with squared norm below 1e-28 of the total
    are treated as numerically zero and excluded.
    """
    cdef Py_ssize_t n = at.shape[0]
    cdef Py_ssize_t m = at.shape[1]
    cdef Py_ssize_t nv = vt.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef double off, total, floor
    cdef double[::1] norms = view.array(shape=(max(n, 1),), itemsize=sizeof(double), format="d")
    cdef int sweep = 0
    off = 0.0
    while True:
        total = 0.0
        off = 0.0
        for i in range(n):
            norms[i] = _dot(at, i, i)
            total += norms[i]
        if total == 0.0:
            off = 0.0
            break
        floor = 1e-28 * total
        for i in range(n - 1):
            if norms[i] <= floor:
                continue
            for j in range(i + 1, n):
                if norms[j] <= floor:
                    continue
                gamma = _dot(at, i, j)
                off += gamma * gamma / (norms[i] * norms[j])
        off = sqrt(off)
        if off < tol or sweep >= max_sweeps:
            break
        sweep += 1
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = _dot(at, i, i)
                beta = _dot(at, j, j)
                gamma = _dot(at, i, j)
                if gamma == 0.0 or fabs(gamma) <= 1e-300:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = at[i, k]
                    y = at[j, k]
                    at[i, k] = c * x - s * y
                    at[j, k] = s * x + c * y
                for k in range(nv):
                    x = vt[i, k]
                    y = vt[j, k]
                    vt[i, k] = c * x - s * y
                    vt[j, k] = s * x + c * y
    return sweep, off
