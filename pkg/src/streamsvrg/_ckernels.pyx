# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Mirrors ``_pykernels`` operation for operation."""

from libc.math cimport exp, isfinite

cdef enum:
    SQUARED = 0
    LOGISTIC = 1


cdef inline double _sigmoid(double a) noexcept nogil:
    cdef double e
    if a >= 0.0:
        return 1.0 / (1.0 + exp(-a))
    e = exp(a)
    return e / (1.0 + e)


cdef inline double _coef(int kind, double a, double y) noexcept nogil:
    # d(loss)/d(x.w); per-sample gradient is coef * x + reg * w
    if kind == SQUARED:
        return -2.0 * (y - a)
    return _sigmoid(a) - y


cdef inline double _reg(int kind, double lam) noexcept nogil:
    if kind == SQUARED:
        return 2.0 * lam
    return lam


def batch_grad_accumulate(int kind, const double[::1] w, const double[:, ::1] X,
                          const double[::1] y, double lam,
                          double[::1] acc, double[::1] comp):
    """Kahan-accumulate per-sample gradients at ``w`` into ``acc``/``comp`` in row order."""
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    cdef double a, c, g, yv, t
    cdef double reg = _reg(kind, lam)
    with nogil:
        for i in range(n):
            a = 0.0
            for j in range(d):
                a += w[j] * X[i, j]
            c = _coef(kind, a, y[i])
            for j in range(d):
                g = c * X[i, j] + reg * w[j]
                yv = g - comp[j]
                t = acc[j] + yv
                comp[j] = (t - acc[j]) - yv
                acc[j] = t


def inner_loop(int kind, double[::1] w, const double[::1] w_tilde, const double[::1] g_hat,
               const double[:, ::1] X, const double[::1] y, double lam, double step,
               double bound_sq):
    """Run one corrected step per row of ``X``, updating ``w`` in place.

    Returns the number of completed steps; a value below ``len(X)`` means the
    iterate left the ball ``|w|^2 <= bound_sq`` or became non-finite after
    that many steps.
    """
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    cdef double a, b, cw, ct, g, nrm
    cdef double reg = _reg(kind, lam)
    cdef Py_ssize_t done = n
    with nogil:
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(d):
                a += w[j] * X[i, j]
                b += w_tilde[j] * X[i, j]
            cw = _coef(kind, a, y[i])
            ct = _coef(kind, b, y[i])
            nrm = 0.0
            for j in range(d):
                g = (cw * X[i, j] + reg * w[j]) - (ct * X[i, j] + reg * w_tilde[j]) + g_hat[j]
                w[j] = w[j] - step * g
                nrm += w[j] * w[j]
            if not isfinite(nrm) or nrm > bound_sq:
                done = i
                break
    return done


def sgd_loop(int kind, double[::1] w, double[::1] w_sum, const double[:, ::1] X,
             const double[::1] y, double lam, const double[::1] steps, double bound_sq):
    """Plain SGD steps ``w -= steps[i] * grad_i(w)``; adds each new iterate to ``w_sum``.

    Returns the number of completed steps (see :func:`inner_loop`).
    """
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    cdef double a, c, g, nrm
    cdef double reg = _reg(kind, lam)
    cdef Py_ssize_t done = n
    with nogil:
        for i in range(n):
            a = 0.0
            for j in range(d):
                a += w[j] * X[i, j]
            c = _coef(kind, a, y[i])
            nrm = 0.0
            for j in range(d):
                g = c * X[i, j] + reg * w[j]
                w[j] = w[j] - steps[i] * g
                nrm += w[j] * w[j]
            if not isfinite(nrm) or nrm > bound_sq:
                done = i
                break
            for j in range(d):
                w_sum[j] += w[j]
    return done
