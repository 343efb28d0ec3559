"""Independent numerical oracles for the test suite.

Nothing here reuses the package's closed forms or likelihood code: the
concentration oracle integrates the two-state depot/central ODE, the AUC
oracle uses adaptive quadrature, the marginal-likelihood oracle uses
adaptive Gauss-Hermite quadrature, and the Fisher oracle enumerates the
hypergeometric support through scipy's pmf.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import minimize_scalar
from scipy.stats import hypergeom, norm


def ode_concentration(t, dose, cl, v, ka, f=1.0):
    """Central concentration via stiff-safe integration of the linear system
    d(depot)/dt = -ka*depot, d(central)/dt = ka*depot - (cl/v)*central."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ke = cl / v

    def rhs(_, state):
        depot, central = state
        return [-ka * depot, ka * depot - ke * central]

    sol = solve_ivp(rhs, (0.0, float(max(t.max(), 1e-9))), [f * dose, 0.0],
                    t_eval=t, rtol=1e-11, atol=1e-14, method="DOP853")
    out = sol.y[1] / v
    return out if out.size > 1 else float(out[0])


def quad_auc(dose, cl, v, ka, f=1.0):
    """Adaptive quadrature of the ODE-free closed profile out to 50 half-lives."""
    ke = cl / v
    t_half = math.log(2.0) / min(ke, ka)

    def conc(t):
        return float(ode_concentration(t, dose, cl, v, ka, f)) if t > 0 else 0.0

    total = 0.0
    edges = np.linspace(0.0, 50.0 * t_half, 26)
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = quad(conc, a, b, limit=200)
        total += val
    return total


def grid_cmax(dose, cl, v, ka, f=1.0, n=20001):
    """Peak concentration by dense-grid search refined with golden section."""
    ke = cl / v
    t_hi = 20.0 * math.log(2.0) / min(ke, ka)
    grid = np.linspace(0.0, t_hi, n)
    vals = ode_concentration(grid, dose, cl, v, ka, f)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n - 1)]
    res = minimize_scalar(lambda t: -float(ode_concentration(t, dose, cl, v, ka, f)),
                          bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    return -res.fun, res.x


def gauss_hermite_ofv(times, y, base_cl, base_v, base_ka, f, dose, sigma_prop,
                      omega2, eta_on="ka", n_nodes=64):
    """-2 log marginal likelihood (n*log(2pi) dropped) for a one-eta subject.

    Adaptive Gauss-Hermite: the integration variable is recentered at the
    posterior mode and rescaled by the mode's curvature.
    """
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)

    def profile(eta):
        cl, v, ka = base_cl, base_v, base_ka
        if eta_on == "cl":
            cl = cl * math.exp(eta)
        elif eta_on == "v":
            v = v * math.exp(eta)
        else:
            ka = ka * math.exp(eta)
        ke = cl / v
        return (f * dose * ka) / (v * (ka - ke)) * (np.exp(-ke * times) - np.exp(-ka * times))

    def neg_log_joint(eta):
        pred = profile(eta)
        g = np.maximum(np.abs(pred) * sigma_prop, 1e-10)
        ll = -0.5 * np.sum(((y - pred) / g) ** 2) - np.sum(np.log(g))
        ll += -0.5 * eta * eta / omega2 - 0.5 * math.log(omega2)
        return -ll

    res = minimize_scalar(neg_log_joint, bounds=(-8, 8), method="bounded",
                          options={"xatol": 1e-12})
    mode = res.x
    h = 1e-4
    curv = (neg_log_joint(mode + h) - 2 * neg_log_joint(mode) + neg_log_joint(mode - h)) / h**2
    scale = 1.0 / math.sqrt(max(curv, 1e-12))

    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    etas = mode + scale * nodes
    vals = np.array([-neg_log_joint(e) for e in etas])
    # integral of exp(logjoint) deta with the probabilists' Hermite weights
    log_terms = vals + 0.5 * nodes**2 + math.log(scale)
    m = log_terms.max()
    integral = math.exp(m) * float(np.sum(weights * np.exp(log_terms - m)))
    # neg_log_joint drops the data-likelihood 2pi constants (engine OFV
    # convention) but not the prior's, which the eta integration consumes.
    log_marginal = math.log(integral) - 0.5 * math.log(2 * math.pi)
    return -2.0 * log_marginal


def fisher_enumeration(a, b, c, d, side="two_sided"):
    """Hypergeometric enumeration through scipy's pmf (independent code path)."""
    r0, r1 = a + b, c + d
    c0 = a + c
    n = r0 + r1
    rv = hypergeom(n, c0, r0)  # number of column-0 outcomes among row 0
    lo = max(0, c0 - r1)
    hi = min(r0, c0)
    ks = np.arange(lo, hi + 1)
    pmf = rv.pmf(ks)
    p_obs = rv.pmf(a)
    if side == "greater":
        return float(np.sum(pmf[ks >= a]))
    if side == "less":
        return float(np.sum(pmf[ks <= a]))
    return float(np.sum(pmf[pmf <= p_obs * (1 + 1e-12)]))


def rank_sum_enumeration(x, y):
    """Exact two-sided rank-sum p by brute-force enumeration (midranks)."""
    from itertools import combinations
    from scipy.stats import rankdata

    pooled = np.concatenate([np.asarray(x, float), np.asarray(y, float)])
    ranks = rankdata(pooled)
    nx = len(x)
    n = len(pooled)
    w_obs = ranks[:nx].sum()
    mu = nx * (n + 1) / 2.0
    hits = 0
    total = 0
    for sel in combinations(range(n), nx):
        total += 1
        if abs(ranks[list(sel)].sum() - mu) >= abs(w_obs - mu) - 1e-9:
            hits += 1
    return hits / total


def normal_cdf(x):
    return norm.cdf(x)
