"""JIT-compiled inner kernels for the standard PK subject problem.

These mirror the generic (numpy) conditional-mode search and FOCE
linearization in ``estimate`` exactly: same finite-difference steps, same
damped-Newton logic, same tolerances.  They exist purely because the inner
loop runs per subject per objective evaluation, where Python/numpy
dispatch overhead dominates.  ``estimate`` falls back to the generic path
whenever numba is unavailable or a subject is not a standard PK kernel.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap

ERROR_SD_FLOOR = 1e-10
KA_KE_DEGENERATE_RTOL = 1e-8
ERR_ADDITIVE = 0
ERR_PROPORTIONAL = 1
ERR_COMBINED = 2


@njit(cache=True)
def _conc_at(t, dose, cl, v, ka, f):
    if t < 0.0:
        return 0.0
    ke = cl / v
    diff = ka - ke
    if abs(diff) < KA_KE_DEGENERATE_RTOL * ke:
        return f * dose * ke * t / v * math.exp(-ke * t)
    return (f * dose * ka) / (v * diff) * (-math.exp(-ke * t) * math.expm1(-diff * t))


@njit(cache=True)
def _error_sd_at(pred, err_model, sig_prop, sig_add):
    if err_model == ERR_ADDITIVE:
        sd = sig_add
    elif err_model == ERR_PROPORTIONAL:
        sd = pred * sig_prop
    else:
        sd = math.sqrt(sig_add * sig_add + pred * pred * sig_prop * sig_prop)
    if sd < ERROR_SD_FLOOR:
        sd = ERROR_SD_FLOOR
    return sd


@njit(cache=True)
def _indiv(eta, base_cl, base_v, base_ka, map_cl, map_v, map_ka):
    cl = base_cl * (math.exp(eta[map_cl]) if map_cl >= 0 else 1.0)
    v = base_v * (math.exp(eta[map_v]) if map_v >= 0 else 1.0)
    ka = base_ka * (math.exp(eta[map_ka]) if map_ka >= 0 else 1.0)
    return cl, v, ka


@njit(cache=True)
def _inner_value(eta, times, y, base_cl, base_v, base_ka, f, dose,
                 err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                 map_cl, map_v, map_ka):
    value = logdet_omega
    for j in range(eta.size):
        value += eta[j] * eta[j] * inv_omega[j]
    cl, v, ka = _indiv(eta, base_cl, base_v, base_ka, map_cl, map_v, map_ka)
    for i in range(times.size):
        c = _conc_at(times[i], dose, cl, v, ka, f)
        g = _error_sd_at(c, err_model, sig_prop, sig_add)
        r = y[i] - c
        value += r * r / (g * g) + 2.0 * math.log(g)
    if not math.isfinite(value):
        return np.inf
    return value


@njit(cache=True)
def _chol_in_place(a):
    """Lower Cholesky of a small symmetric matrix; returns False if not PD."""
    n = a.shape[0]
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if s <= 0.0 or not math.isfinite(s):
            return False
        a[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / a[j, j]
    return True


@njit(cache=True)
def _chol_solve(chol, b):
    """Solve L L' x = b given the lower factor (in the lower triangle)."""
    n = b.size
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= chol[i, k] * x[k]
        x[i] = s / chol[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= chol[k, i] * x[k]
        x[i] = s / chol[i, i]
    return x


@njit(cache=True)
def _eta_newton(start, times, y, base_cl, base_v, base_ka, f, dose,
                err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                map_cl, map_v, map_ka, gtol, stol, max_iter):
    """Damped Newton on the inner objective; mirrors the generic solver."""
    k = start.size
    hg = 3e-5
    hh = 3e-4
    x = start.copy()
    fx = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                      err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                      map_cl, map_v, map_ka)
    if not math.isfinite(fx):
        return x, fx, False

    grad = np.empty(k)
    hess = np.empty((k, k))
    work = np.empty(k)
    last_step = 1e300
    converged = False

    for _ in range(max_iter):
        f0 = fx
        for i in range(k):
            xi = x[i]
            x[i] = xi + hg
            fp = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                              err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                              map_cl, map_v, map_ka)
            x[i] = xi - hg
            fm = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                              err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                              map_cl, map_v, map_ka)
            grad[i] = (fp - fm) / (2.0 * hg)
            x[i] = xi + hh
            fhp = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                               err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                               map_cl, map_v, map_ka)
            x[i] = xi - hh
            fhm = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                               err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                               map_cl, map_v, map_ka)
            hess[i, i] = (fhp - 2.0 * f0 + fhm) / (hh * hh)
            x[i] = xi
        for i in range(k):
            for j in range(i + 1, k):
                xi = x[i]
                xj = x[j]
                x[i] = xi + hh
                x[j] = xj + hh
                fpp = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                                   err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                                   map_cl, map_v, map_ka)
                x[j] = xj - hh
                fpm = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                                   err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                                   map_cl, map_v, map_ka)
                x[i] = xi - hh
                fmm = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                                   err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                                   map_cl, map_v, map_ka)
                x[j] = xj + hh
                fmp = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                                   err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                                   map_cl, map_v, map_ka)
                x[i] = xi
                x[j] = xj
                hess[i, j] = (fpp - fpm - fmp + fmm) / (4.0 * hh * hh)
                hess[j, i] = hess[i, j]

        finite = True
        for i in range(k):
            if not math.isfinite(grad[i]):
                finite = False
            for j in range(k):
                if not math.isfinite(hess[i, j]):
                    finite = False
        if not finite:
            break

        gmax = 0.0
        for i in range(k):
            if abs(grad[i]) > gmax:
                gmax = abs(grad[i])
        grad_small = gmax < gtol
        if grad_small and last_step < stol:
            converged = True
            break

        # regularize until positive definite
        lam = 0.0
        a = np.empty((k, k))
        for _ in range(12):
            for i in range(k):
                for j in range(k):
                    a[i, j] = hess[i, j]
                a[i, i] += lam
            test = a.copy()
            if _chol_in_place(test):
                break
            lam = max(2.0 * lam, 1e-6) * 10.0
        for i in range(k):
            for j in range(k):
                a[i, j] = hess[i, j]
            a[i, i] += lam
        fac = a.copy()
        if _chol_in_place(fac):
            for i in range(k):
                work[i] = -grad[i]
            step = _chol_solve(fac, work)
        else:
            step = np.empty(k)
            for i in range(k):
                step[i] = -grad[i]

        norm = 0.0
        for i in range(k):
            norm += step[i] * step[i]
        norm = math.sqrt(norm)
        if norm > 10.0:
            for i in range(k):
                step[i] *= 10.0 / norm
            norm = 10.0
        if grad_small and norm < stol:
            for i in range(k):
                x[i] += step[i]
            fx = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                              err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                              map_cl, map_v, map_ka)
            converged = True
            break

        slope = 0.0
        for i in range(k):
            slope += grad[i] * step[i]

        accepted = -1
        best_idx = -1
        best_val = np.inf
        cand = np.empty(k)
        sc = 1.0
        for idx in range(8):
            for i in range(k):
                cand[i] = x[i] + sc * step[i]
            fc = _inner_value(cand, times, y, base_cl, base_v, base_ka, f, dose,
                              err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                              map_cl, map_v, map_ka)
            if fc < best_val:
                best_val = fc
                best_idx = idx
            if fc <= f0 + 1e-4 * sc * slope:
                accepted = idx
                break
            sc *= 0.5
        if accepted < 0:
            if best_val < f0:
                accepted = best_idx
            else:
                if gmax < 1e-6:
                    converged = True  # flat to numerical noise
                break
        sc = 0.5 ** accepted
        for i in range(k):
            x[i] = x[i] + sc * step[i]
        fx = _inner_value(x, times, y, base_cl, base_v, base_ka, f, dose,
                          err_model, sig_prop, sig_add, inv_omega, logdet_omega,
                          map_cl, map_v, map_ka)
        last_step = 0.0
        for i in range(k):
            last_step += (sc * step[i]) ** 2
        last_step = math.sqrt(last_step)
        if last_step < stol and gmax < gtol:
            converged = True
            break

    return x, fx, converged


@njit(cache=True)
def _foce_piece(eta, times, y, base_cl, base_v, base_ka, f, dose,
                err_model, sig_prop, sig_add, omega_diag,
                map_cl, map_v, map_ka, grad_step):
    """FOCE-I linearized OFV contribution at the conditional mode.

    Returns (ofv, ok); ok=False flags a non-finite prediction or a
    non-positive-definite linearized covariance.
    """
    n = times.size
    k = eta.size
    if n == 0:
        return 0.0, True

    f0 = np.empty(n)
    cl, v, ka = _indiv(eta, base_cl, base_v, base_ka, map_cl, map_v, map_ka)
    for i in range(n):
        f0[i] = _conc_at(times[i], dose, cl, v, ka, f)

    gmat = np.empty((n, k))
    work = eta.copy()
    for j in range(k):
        h = grad_step * max(1.0, abs(eta[j]))
        work[j] = eta[j] + h
        clp, vp, kap = _indiv(work, base_cl, base_v, base_ka, map_cl, map_v, map_ka)
        work[j] = eta[j] - h
        clm, vm, kam = _indiv(work, base_cl, base_v, base_ka, map_cl, map_v, map_ka)
        work[j] = eta[j]
        for i in range(n):
            fp = _conc_at(times[i], dose, clp, vp, kap, f)
            fm = _conc_at(times[i], dose, clm, vm, kam, f)
            gmat[i, j] = (fp - fm) / (2.0 * h)

    vmat = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for m in range(k):
                s += gmat[i, m] * omega_diag[m] * gmat[j, m]
            vmat[i, j] = s
    e = np.empty(n)
    ok = True
    for i in range(n):
        g = _error_sd_at(f0[i], err_model, sig_prop, sig_add)
        vmat[i, i] += g * g
        resid = y[i] - f0[i]
        s = 0.0
        for m in range(k):
            s += gmat[i, m] * eta[m]
        e[i] = resid + s
        if not (math.isfinite(f0[i]) and math.isfinite(e[i])):
            ok = False
    if not ok:
        return 0.0, False
    if not _chol_in_place(vmat):
        return 0.0, False
    half = np.empty(n)
    for i in range(n):
        s = e[i]
        for m in range(i):
            s -= vmat[i, m] * half[m]
        half[i] = s / vmat[i, i]
    ofv = 0.0
    for i in range(n):
        ofv += 2.0 * math.log(vmat[i, i]) + half[i] * half[i]
    if not math.isfinite(ofv):
        return 0.0, False
    return ofv, True


def warm_up() -> None:
    """Force JIT compilation of all kernels (first call per machine)."""
    if not HAVE_NUMBA:
        return
    times = np.array([5.0, 15.0])
    y = np.array([0.2, 0.3])
    om = np.array([0.1, 0.1, 0.1])
    eta, _, _ = _eta_newton(np.zeros(3), times, y, 0.15, 14.0, 0.18, 1.0, 6.0,
                            ERR_PROPORTIONAL, 0.14, 0.0, 1.0 / om, float(np.sum(np.log(om))),
                            0, 1, 2, 1e-8, 1e-8, 10)
    _foce_piece(eta, times, y, 0.15, 14.0, 0.18, 1.0, 6.0,
                ERR_PROPORTIONAL, 0.14, 0.0, om, 0, 1, 2, 1e-5)
