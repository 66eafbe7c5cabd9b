"""Pure-Python kernels, used when the compiled extension is unavailable.

Each function performs the same floating-point operations in the same order
as its counterpart in ``_ckernels.pyx``; results are bit-identical.
"""

from math import exp, isfinite

SQUARED = 0
LOGISTIC = 1


def _sigmoid(a):
    if a >= 0.0:
        return 1.0 / (1.0 + exp(-a))
    e = exp(a)
    return e / (1.0 + e)


def _coef(kind, a, y):
    if kind == SQUARED:
        return -2.0 * (y - a)
    return _sigmoid(a) - y


def _reg(kind, lam):
    if kind == SQUARED:
        return 2.0 * lam
    return lam


def batch_grad_accumulate(kind, w, X, y, lam, acc, comp):
    reg = _reg(kind, lam)
    wl = w.tolist()
    s = acc.tolist()
    cp = comp.tolist()
    d = len(wl)
    for x, yi in zip(X.tolist(), y.tolist()):
        a = 0.0
        for j in range(d):
            a += wl[j] * x[j]
        c = _coef(kind, a, yi)
        for j in range(d):
            g = c * x[j] + reg * wl[j]
            yv = g - cp[j]
            t = s[j] + yv
            cp[j] = (t - s[j]) - yv
            s[j] = t
    acc[:] = s
    comp[:] = cp


def inner_loop(kind, w, w_tilde, g_hat, X, y, lam, step, bound_sq):
    reg = _reg(kind, lam)
    wl = w.tolist()
    wt = w_tilde.tolist()
    gh = g_hat.tolist()
    d = len(wl)
    done = len(X)
    for i, (x, yi) in enumerate(zip(X.tolist(), y.tolist())):
        a = 0.0
        b = 0.0
        for j in range(d):
            a += wl[j] * x[j]
            b += wt[j] * x[j]
        cw = _coef(kind, a, yi)
        ct = _coef(kind, b, yi)
        nrm = 0.0
        for j in range(d):
            g = (cw * x[j] + reg * wl[j]) - (ct * x[j] + reg * wt[j]) + gh[j]
            wl[j] = wl[j] - step * g
            nrm += wl[j] * wl[j]
        if not isfinite(nrm) or nrm > bound_sq:
            done = i
            break
    w[:] = wl
    return done


def sgd_loop(kind, w, w_sum, X, y, lam, steps, bound_sq):
    reg = _reg(kind, lam)
    wl = w.tolist()
    ws = w_sum.tolist()
    d = len(wl)
    done = len(X)
    for i, (x, yi, st) in enumerate(zip(X.tolist(), y.tolist(), steps.tolist())):
        a = 0.0
        for j in range(d):
            a += wl[j] * x[j]
        c = _coef(kind, a, yi)
        nrm = 0.0
        for j in range(d):
            g = c * x[j] + reg * wl[j]
            wl[j] = wl[j] - st * g
            nrm += wl[j] * wl[j]
        if not isfinite(nrm) or nrm > bound_sq:
            done = i
            break
        for j in range(d):
            ws[j] += wl[j]
    w[:] = wl
    w_sum[:] = ws
    return done
