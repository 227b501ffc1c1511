"""Hot inner loops: linear-head gradient descent and sufficiency-gap counting.

Each kernel has a numba ``@njit`` version and a vectorised numpy version with
the same signature. ``USE_NUMBA`` picks the default; set
``IMPLICIT_ALIGN_DISABLE_NUMBA=1`` to force the numpy path (numba is also
skipped silently when it is not importable).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

DISABLE_ENV = "IMPLICIT_ALIGN_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()

# loss codes shared with the models module
SQUARE = 0
LOGISTIC = 1

# fit status codes
CONVERGED = 0
BUDGET = 1
DIVERGED = 2


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# Linear head fitting by full-batch gradient descent
# --------------------------------------------------------------------------


def _head_loss_grad_loop(za, y, h, loss_code, grad_out):
    n, k = za.shape
    for j in range(k):
        grad_out[j] = 0.0
    loss = 0.0
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += za[i, j] * h[j]
        if loss_code == 0:
            r = s - y[i]
            loss += r * r
            c = 2.0 * r
        else:
            m = -y[i] * s
            if m > 0:
                loss += m + np.log1p(np.exp(-m))
                sig = 1.0 / (1.0 + np.exp(-m))
            else:
                loss += np.log1p(np.exp(m))
                e = np.exp(m)
                sig = e / (1.0 + e)
            c = -y[i] * sig
        for j in range(k):
            grad_out[j] += c * za[i, j]
    for j in range(k):
        grad_out[j] /= n
    return loss / n


_head_loss_grad = _njit(_head_loss_grad_loop)


def _fit_linear_head_loop(za, y, h0, lr, max_steps, tol, loss_code, norm_cap):
    k = za.shape[1]
    h = h0.copy()
    g = np.empty(k)
    loss0 = _head_loss_grad(za, y, h, loss_code, g)
    steps = 0
    while True:
        gn = 0.0
        for j in range(k):
            gn += g[j] * g[j]
        gn = np.sqrt(gn)
        if gn <= tol:
            return h, gn, steps, 0
        if steps >= max_steps:
            return h, gn, steps, 1
        for j in range(k):
            h[j] -= lr * g[j]
        if norm_cap > 0.0:
            hn = 0.0
            for j in range(k):
                hn += h[j] * h[j]
            hn = np.sqrt(hn)
            if hn > norm_cap:
                for j in range(k):
                    h[j] *= norm_cap / hn
        steps += 1
        loss = _head_loss_grad(za, y, h, loss_code, g)
        if not np.isfinite(loss) or loss > 10.0 * loss0 + 1e-12:
            return h, gn, steps, 2


_fit_linear_head_nb = _njit(_fit_linear_head_loop)


def head_loss_grad_numpy(za, y, h, loss_code):
    s = za @ h
    n = za.shape[0]
    if loss_code == SQUARE:
        r = s - y
        return float(r @ r) / n, (2.0 / n) * (za.T @ r)
    m = -y * s
    loss = float(np.logaddexp(0.0, m).sum()) / n
    sig = 0.5 * (1.0 + np.tanh(0.5 * m))
    return loss, -(za.T @ (y * sig)) / n


def fit_linear_head_numpy(za, y, h0, lr, max_steps, tol, loss_code, norm_cap):
    h = np.array(h0, dtype=np.float64, copy=True)
    loss0, g = head_loss_grad_numpy(za, y, h, loss_code)
    steps = 0
    while True:
        gn = float(np.sqrt(g @ g))
        if gn <= tol:
            return h, gn, steps, CONVERGED
        if steps >= max_steps:
            return h, gn, steps, BUDGET
        h -= lr * g
        if norm_cap > 0.0:
            hn = float(np.sqrt(h @ h))
            if hn > norm_cap:
                h *= norm_cap / hn
        steps += 1
        loss, g = head_loss_grad_numpy(za, y, h, loss_code)
        if not np.isfinite(loss) or loss > 10.0 * loss0 + 1e-12:
            return h, gn, steps, DIVERGED


def fit_linear_head_numba(za, y, h0, lr, max_steps, tol, loss_code, norm_cap):
    h, gn, steps, status = _fit_linear_head_nb(
        np.ascontiguousarray(za, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(h0, dtype=np.float64),
        float(lr),
        int(max_steps),
        float(tol),
        int(loss_code),
        float(norm_cap),
    )
    return h, float(gn), int(steps), int(status)


def fit_linear_head(za, y, h0, lr, max_steps, tol, loss_code, norm_cap=0.0, use_numba=None):
    """Gradient descent on a linear head over fixed augmented features.

    ``za`` is the (n, k+1) embedding with a trailing ones column, ``h0`` the
    starting (w, b). Stops when the gradient norm is <= ``tol`` or after
    ``max_steps`` updates. Returns ``(h, grad_norm, steps, status)`` with
    status 0 converged, 1 budget exhausted, 2 diverged (loss grew 10x).
    ``norm_cap > 0`` projects onto the ball of that radius after each update.
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    impl = fit_linear_head_numba if (use_numba and HAVE_NUMBA) else fit_linear_head_numpy
    return impl(za, y, h0, lr, max_steps, tol, loss_code, norm_cap)


# --------------------------------------------------------------------------
# Conditional CDF counts for the regression sufficiency gap
# --------------------------------------------------------------------------


def _regression_counts_loop(y, s, thresholds):
    m = thresholds.shape[0]
    below = np.zeros(m, dtype=np.int64)
    both = np.zeros(m, dtype=np.int64)
    for i in range(m):
        t = thresholds[i]
        nb = 0
        nbb = 0
        for j in range(y.shape[0]):
            if s[j] <= t:
                nb += 1
                if y[j] <= t:
                    nbb += 1
        below[i] = nb
        both[i] = nbb
    return below, both


_regression_counts_nb = _njit(_regression_counts_loop)


def regression_counts_numpy(y, s, thresholds):
    pred_below = s[None, :] <= thresholds[:, None]
    true_below = y[None, :] <= thresholds[:, None]
    return pred_below.sum(axis=1), (pred_below & true_below).sum(axis=1)


def regression_counts_numba(y, s, thresholds):
    return _regression_counts_nb(
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(s, dtype=np.float64),
        np.ascontiguousarray(thresholds, dtype=np.float64),
    )


def regression_counts(y, s, thresholds, use_numba=None):
    """Per threshold t: #(s <= t) and #(s <= t and y <= t)."""
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and HAVE_NUMBA:
        below, both = regression_counts_numba(y, s, thresholds)
    else:
        below, both = regression_counts_numpy(y, s, thresholds)
    return np.asarray(below, dtype=np.int64), np.asarray(both, dtype=np.int64)
