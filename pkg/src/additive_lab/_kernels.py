"""Compiled inner loops for online SGD.

Both kernels work in place on float64 arrays and report the first step at
which a non-finite value appeared (or -1).  Fastmath is limited to
reassociation and contraction so NaN/Inf checks stay meaningful.
"""
import numba
import numpy as np

_FM = {"reassoc", "contract"}


@numba.njit(cache=True, fastmath=_FM, inline="always")
def _he_series(z, c):
    # Clenshaw-free forward recurrence; c holds Hermite coefficients of one neuron.
    n = c.shape[0]
    if n == 0:
        return 0.0
    h0 = 1.0
    acc = c[0]
    if n == 1:
        return acc
    h1 = z
    acc += c[1] * h1
    for k in range(1, n - 1):
        h2 = z * h1 - k * h0
        acc += c[k + 1] * h2
        h0 = h1
        h1 = h2
    return acc


@numba.njit(cache=True, fastmath=_FM)
def spherical_sgd(W, a, b, X, Y, etas, kind, dcoef, offset):
    """Correlation-loss spherical SGD, one neuron at a time.

    Neurons never interact under the correlation loss, so looping neuron-outer
    gives the same per-neuron arithmetic as a step-by-step loop.  ``kind`` is 0
    for ReLU and 1 for polynomial activations whose derivative coefficients
    are the rows of ``dcoef``.  Returns the first bad global step or -1.
    """
    J, d = W.shape
    T = X.shape[0]
    bad = -1
    w = np.empty(d)
    for j in range(J):
        for k in range(d):
            w[k] = W[j, k]
        for t in range(T):
            s = 0.0
            for k in range(d):
                s += w[k] * X[t, k]
            z = s + b[j]
            if kind == 0:
                g = 1.0 if z > 0.0 else 0.0
            else:
                g = _he_series(z, dcoef[j])
            c = etas[t] * Y[t] * a[j] * g
            if c == 0.0:
                continue
            nrm = 0.0
            for k in range(d):
                w[k] += c * (X[t, k] - s * w[k])
                nrm += w[k] * w[k]
            if not np.isfinite(nrm) or nrm == 0.0:
                if bad < 0 or offset + t < bad:
                    bad = offset + t
                break
            inv = 1.0 / np.sqrt(nrm)
            for k in range(d):
                w[k] *= inv
        for k in range(d):
            W[j, k] = w[k]
    return bad


@numba.njit(cache=True, fastmath=_FM)
def lazy_sgd(W, a, b, X, Y, eta, kind, coef, dcoef, offset):
    """Plain SGD on 0.5 (f - y)^2 with f = (1/J) sum_j a_j sigma_j(w_j.x + b_j).

    ``a`` is stored at magnitude sqrt(J), so this is the usual 1/sqrt(J)
    parametrization; the a-step is taken in that parametrization.
    Biases stay frozen.  Returns the first bad global step or -1.
    """
    J, d = W.shape
    T = X.shape[0]
    z = np.empty(J)
    act = np.empty(J)
    der = np.empty(J)
    for t in range(T):
        f = 0.0
        for j in range(J):
            s = b[j]
            for k in range(d):
                s += W[j, k] * X[t, k]
            z[j] = s
            if kind == 0:
                act[j] = s if s > 0.0 else 0.0
                der[j] = 1.0 if s > 0.0 else 0.0
            else:
                act[j] = _he_series(s, coef[j])
                der[j] = _he_series(s, dcoef[j])
            f += a[j] * act[j]
        f /= J
        r = f - Y[t]
        if not np.isfinite(r):
            return offset + t
        for j in range(J):
            cw = eta * r * a[j] * der[j] / J
            a[j] -= eta * r * act[j]
            if cw != 0.0:
                for k in range(d):
                    W[j, k] -= cw * X[t, k]
    return -1
