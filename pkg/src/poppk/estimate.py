"""FOCE-with-interaction estimation for the population PK model.

The likelihood approximation follows the classic conditional scheme: per
subject, the random-effect vector is set to its posterior mode (empirical
Bayes estimate), the model is linearized about that mode, and the residual
variance is evaluated at the mode (the "interaction" part).  The objective
function value (OFV) is -2 log-likelihood with the n*log(2*pi) constant
dropped, so only OFV differences are meaningful across tools.

Outer estimation runs a quasi-Newton search with numerical gradients over
transformed parameters (log for positive magnitudes, identity for covariate
coefficients).  Inner eta optimization is a small damped Newton on batched
finite differences, multi-started from zero and one perturbed point.

Per-subject terms are accumulated in subject order, so results do not
depend on any parallel scheduling above this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import _fastpath as fp
from .dataset import StudyDataset, Subject
from .model import (
    CovariateEffect,
    OmegaMatrix,
    SigmaParams,
    ThetaVector,
    WEIGHT_ON_CL,
    concentration_profile,
    error_sd,
)

__all__ = [
    "EvaluationFailure",
    "ModelSpec",
    "ParameterSet",
    "FitSettings",
    "FitResult",
    "ParamUncertainty",
    "EbeEstimate",
    "SearchStep",
    "SearchResult",
    "inner_objective",
    "estimate_ebe",
    "foce_ofv",
    "fit",
    "standard_errors",
    "covariate_search",
    "eta_shrinkage",
    "eps_shrinkage",
]

STRUCTURAL_ONE_CMT_FO = "one_compartment_first_order"

# Inner eta-search stopping: the contract is step and gradient norms below
# 1e-8; solving one decade tighter keeps the total-OFV noise floor (inner
# error times O(1) linearization sensitivity, summed over subjects) far
# below the outer gradient resolution.
INNER_TOL = 1e-9
INNER_MAX_ITER = 80
GRAD_FD_STEP = 1e-5       # relative step for the linearization d f / d eta
HESS_FD_STEP = 1e-4       # relative step for the outer OFV Hessian
PENALTY_OFV = 1e10        # returned to the outer optimizer on rejected steps
TRANSFORM_BOUND = 40.0    # |x| bound in transformed space, guards overflow


class EvaluationFailure(RuntimeError):
    """Objective could not be evaluated at these parameters (rejected step)."""


@dataclass(frozen=True)
class ModelSpec:
    """Structural choice, error model, covariate map and parameter layout.

    ``fixed`` names parameters excluded from estimation (values taken from
    the initial ParameterSet): any of ``cl_f``, ``v_f``, ``ka``, ``f_large``
    or a covariate-effect name such as ``cl~wt:power``.
    """

    structural: str = STRUCTURAL_ONE_CMT_FO
    error_model: str = "proportional"
    covariate_map: tuple[CovariateEffect, ...] = (WEIGHT_ON_CL,)
    etas: tuple[str, ...] = ("cl", "v", "ka")
    fixed: frozenset = frozenset()

    def __post_init__(self):
        if self.structural != STRUCTURAL_ONE_CMT_FO:
            raise ValueError(f"unsupported structural model {self.structural!r}")
        if self.error_model not in ("additive", "proportional", "combined"):
            raise ValueError(f"unknown error model {self.error_model!r}")
        for name in self.etas:
            if name not in ("cl", "v", "ka"):
                raise ValueError(f"unknown random effect {name!r}")
        seen = set()
        for eff in self.covariate_map:
            if eff.name in seen:
                raise ValueError(f"duplicate covariate effect {eff.name}")
            seen.add(eff.name)

    def with_effect(self, effect: CovariateEffect) -> "ModelSpec":
        return replace(self, covariate_map=self.covariate_map + (effect,))

    def without_effect(self, effect: CovariateEffect) -> "ModelSpec":
        kept = tuple(e for e in self.covariate_map if e.name != effect.name)
        return replace(self, covariate_map=kept)


@dataclass(frozen=True)
class ParameterSet:
    theta: ThetaVector
    omega: OmegaMatrix
    sigma: SigmaParams


@dataclass(frozen=True)
class FitSettings:
    ofv_rel_tol: float = 1e-6
    grad_tol: float = 1e-3
    max_evals: int = 5000
    compute_se: bool = True


@dataclass(frozen=True)
class ParamUncertainty:
    estimate: float       # reported scale (theta natural, omega/sigma_prop CV%)
    se: float
    rse_percent: float
    ci95: tuple[float, float]


@dataclass(frozen=True)
class EbeEstimate:
    eta: np.ndarray
    converged: bool


@dataclass
class FitResult:
    params: ParameterSet
    ofv: float
    converged: bool
    n_function_evals: int
    message: str
    param_names: tuple[str, ...]
    estimates: dict[str, float]                  # reported scale, keyed like param_names
    se: dict[str, ParamUncertainty]              # empty when SEs unavailable
    ebes: dict[int, np.ndarray]                  # subject_id -> eta vector
    eta_names: tuple[str, ...]
    eta_shrinkage: dict[str, float]              # raw fractions (can be < 0)
    eps_shrinkage: float
    flagged_subjects: tuple[int, ...]            # inner search not fully converged

    @property
    def theta(self) -> ThetaVector:
        return self.params.theta

    @property
    def omega(self) -> OmegaMatrix:
        return self.params.omega

    @property
    def sigma(self) -> SigmaParams:
        return self.params.sigma

    def shrinkage_percent(self) -> dict[str, float]:
        """Clamped-to-[0, 100] shrinkage for reporting; raw values stay in the fields."""
        out = {f"eta_{k}": 100.0 * min(max(v, 0.0), 1.0) for k, v in self.eta_shrinkage.items()}
        out["eps"] = 100.0 * min(max(self.eps_shrinkage, 0.0), 1.0)
        return out


# ---------------------------------------------------------------------------
# Compilation: dataset x model x parameters -> per-subject kernels
# ---------------------------------------------------------------------------

_ERR_CODE = {"additive": fp.ERR_ADDITIVE, "proportional": fp.ERR_PROPORTIONAL,
             "combined": fp.ERR_COMBINED}


@dataclass(frozen=True)
class PkKernel:
    """Plain-array description of a standard PK subject for the JIT kernels."""

    times: np.ndarray   # relative to the dose (negative = pre-dose)
    y: np.ndarray
    base_cl: float
    base_v: float
    base_ka: float
    f: float
    dose: float
    err_model: int
    sig_prop: float
    sig_add: float
    map_cl: int         # eta column per parameter, -1 when the eta is absent
    map_v: int
    map_ka: int


@dataclass
class SubjectProblem:
    """Observations plus batched prediction/error kernels for one subject.

    ``predict`` maps an (m, n_eta) block of eta vectors to (m, n_obs)
    predictions; ``sd`` maps predictions to residual standard deviations.
    ``pk`` carries the JIT-ready description when the subject follows the
    standard PK kernel (None for ad-hoc models, which use the generic path).
    """

    subject_id: int
    y: np.ndarray
    predict: Callable[[np.ndarray], np.ndarray]
    sd: Callable[[np.ndarray], np.ndarray]
    n_eta: int
    pk: PkKernel | None = None


def _covariate_multipliers(ms: ModelSpec, theta: ThetaVector, subject: Subject):
    mult = {"cl": 1.0, "v": 1.0, "ka": 1.0}
    for eff in ms.covariate_map:
        value = subject.covariate(eff.covariate)
        mult[eff.parameter] *= float(eff.multiplier(value, theta.coefficient(eff)))
    if min(mult.values()) <= 0:
        raise EvaluationFailure(
            f"covariate effects drive a parameter nonpositive for subject {subject.subject_id}"
        )
    return mult


def compile_subject(subject: Subject, ms: ModelSpec, params: ParameterSet) -> SubjectProblem:
    doses = subject.doses
    if len(doses) != 1:
        raise ValueError(
            f"subject {subject.subject_id} has {len(doses)} dose records; "
            "the structural model supports a single bolus"
        )
    dose = doses[0]
    usable = [r for r in subject.observations if r.usable]
    times = np.array([r.time - dose.time for r in usable], dtype=float)
    y = np.array([r.dv for r in usable], dtype=float)
    pre_dose = times < 0

    theta, sigma = params.theta, params.sigma
    if sigma.model != ms.error_model:
        raise ValueError(
            f"sigma parameterizes {sigma.model!r} but the model spec says {ms.error_model!r}"
        )
    if not sigma.active_positive():
        raise ValueError("estimation requires strictly positive active error components")
    mult = _covariate_multipliers(ms, theta, subject)
    base = {
        "cl": theta.cl_f * mult["cl"],
        "v": theta.v_f * mult["v"],
        "ka": theta.ka * mult["ka"],
    }
    f = 1.0 if subject.volgrp == 0 else theta.f_large
    amt = dose.amt
    eta_cols = {name: i for i, name in enumerate(ms.etas)}

    def predict(etas: np.ndarray) -> np.ndarray:
        etas = np.atleast_2d(etas)
        m = etas.shape[0]

        def indiv(name):
            col = eta_cols.get(name)
            scale = np.exp(etas[:, col:col + 1]) if col is not None else 1.0
            return base[name] * scale if col is not None else np.full((m, 1), base[name])

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            conc = concentration_profile(times[None, :], amt, indiv("cl"), indiv("v"),
                                         indiv("ka"), f)
        if np.any(pre_dose):
            conc = np.where(pre_dose[None, :], 0.0, conc)
        return conc

    def sd(pred: np.ndarray) -> np.ndarray:
        return error_sd(pred, sigma)

    pk = PkKernel(
        times=times,
        y=y,
        base_cl=base["cl"],
        base_v=base["v"],
        base_ka=base["ka"],
        f=f,
        dose=amt,
        err_model=_ERR_CODE[sigma.model],
        sig_prop=sigma.prop,
        sig_add=sigma.add,
        map_cl=eta_cols.get("cl", -1),
        map_v=eta_cols.get("v", -1),
        map_ka=eta_cols.get("ka", -1),
    )
    return SubjectProblem(
        subject_id=subject.subject_id,
        y=y,
        predict=predict,
        sd=sd,
        n_eta=len(ms.etas),
        pk=pk,
    )


def subject_individual_params(subject: Subject, ms: ModelSpec, params: ParameterSet, eta):
    """IndividualParams for one subject at an eta vector laid out like ``ms.etas``."""
    from .model import IndividualParams

    eta = np.asarray(eta, dtype=float)
    if eta.shape != (len(ms.etas),):
        raise ValueError(f"eta must have {len(ms.etas)} components, one per {ms.etas}")
    mult = _covariate_multipliers(ms, params.theta, subject)
    scale = {name: math.exp(eta[i]) for i, name in enumerate(ms.etas)}
    theta = params.theta
    return IndividualParams(
        cl=theta.cl_f * mult["cl"] * scale.get("cl", 1.0),
        v=theta.v_f * mult["v"] * scale.get("v", 1.0),
        ka=theta.ka * mult["ka"] * scale.get("ka", 1.0),
        f=1.0 if subject.volgrp == 0 else theta.f_large,
    )


def compile_dataset(ds: StudyDataset, ms: ModelSpec, params: ParameterSet) -> list[SubjectProblem]:
    if "f_large" not in ms.fixed and not any(s.volgrp == 1 for s in ds.subjects):
        raise ValueError(
            "f_large is estimated but the dataset has no high-volume subjects; fix it"
        )
    for eff in ms.covariate_map:
        params.theta.coefficient(eff)  # raises KeyError early when missing
    return [compile_subject(s, ms, params) for s in ds.subjects]


def _omega_diag(ms: ModelSpec, omega: OmegaMatrix) -> np.ndarray:
    diag = np.array([omega.variance(name) for name in ms.etas], dtype=float)
    if np.any(diag <= 0):
        raise ValueError("omega variances must be > 0 for all active random effects")
    return diag


# ---------------------------------------------------------------------------
# Inner problem: conditional eta mode
# ---------------------------------------------------------------------------

def _inner_values(prob: SubjectProblem, omega_diag: np.ndarray, etas: np.ndarray) -> np.ndarray:
    """Batched inner objective: data term + eta' Omega^-1 eta + log|Omega|."""
    etas = np.atleast_2d(etas)
    prior = etas ** 2 @ (1.0 / omega_diag) + np.sum(np.log(omega_diag))
    if prob.y.size == 0:
        return prior
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        pred = prob.predict(etas)
        g2 = prob.sd(pred) ** 2
        data = np.sum((prob.y[None, :] - pred) ** 2 / g2 + np.log(g2), axis=1)
    values = data + prior
    return np.where(np.isfinite(values), values, np.inf)


def _newton_minimize(fun_batch, x0: np.ndarray, gtol: float = INNER_TOL,
                     stol: float = INNER_TOL, max_iter: int = INNER_MAX_ITER):
    """Damped Newton with batched finite differences; returns (x, f, converged)."""
    k = x0.size
    hg, hh = 3e-5, 3e-4
    x = np.array(x0, dtype=float)
    fx = float(fun_batch(x[None, :])[0])
    if not np.isfinite(fx):
        return x, fx, False
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    last_step = np.inf
    converged = False

    for _ in range(max_iter):
        pts = [x]
        for i in range(k):
            for h in (hg, -hg, hh, -hh):
                p = x.copy()
                p[i] += h
                pts.append(p)
        for (i, j) in pairs:
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                p = x.copy()
                p[i] += si * hh
                p[j] += sj * hh
                pts.append(p)
        vals = fun_batch(np.array(pts))
        f0 = float(vals[0])
        grad = np.empty(k)
        hess = np.empty((k, k))
        for i in range(k):
            fp, fm, fhp, fhm = vals[1 + 4 * i:5 + 4 * i]
            grad[i] = (fp - fm) / (2 * hg)
            hess[i, i] = (fhp - 2 * f0 + fhm) / hh ** 2
        off = 1 + 4 * k
        for idx, (i, j) in enumerate(pairs):
            fpp, fpm, fmp, fmm = vals[off + 4 * idx:off + 4 * idx + 4]
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * hh ** 2)
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
            break

        grad_small = np.max(np.abs(grad)) < gtol
        if grad_small and last_step < stol:
            converged = True
            break

        lam = 0.0
        for _ in range(12):
            try:
                np.linalg.cholesky(hess + lam * np.eye(k))
                break
            except np.linalg.LinAlgError:
                lam = max(2.0 * lam, 1e-6) * 10.0
        try:
            step = np.linalg.solve(hess + lam * np.eye(k), -grad)
        except np.linalg.LinAlgError:
            step = -grad
        norm = np.linalg.norm(step)
        if norm > 10.0:  # guard against exp overflow during line search
            step *= 10.0 / norm
            norm = 10.0
        if grad_small and norm < stol:
            x = x + step
            fx = float(fun_batch(x[None, :])[0])
            converged = True
            break
        slope = float(grad @ step)

        scales = 0.5 ** np.arange(8)
        cand = x[None, :] + scales[:, None] * step[None, :]
        cvals = fun_batch(cand)
        accepted = None
        for idx, sc in enumerate(scales):
            if cvals[idx] <= f0 + 1e-4 * sc * slope:
                accepted = idx
                break
        if accepted is None:
            idx = int(np.argmin(cvals))
            if not (cvals[idx] < f0):
                if np.max(np.abs(grad)) < 1e-6:
                    converged = True  # flat to numerical noise
                break
            accepted = idx
        x = cand[accepted]
        fx = float(cvals[accepted])
        last_step = float(np.linalg.norm(scales[accepted] * step))
        if last_step < stol and np.max(np.abs(grad)) < gtol:
            converged = True
            break

    return x, fx, converged


def _solve_eta(prob: SubjectProblem, omega_diag: np.ndarray, start: np.ndarray):
    """One damped-Newton solve, via the JIT kernel when available."""
    if fp.HAVE_NUMBA and prob.pk is not None:
        pk = prob.pk
        return fp._eta_newton(
            np.asarray(start, dtype=float), pk.times, pk.y, pk.base_cl, pk.base_v,
            pk.base_ka, pk.f, pk.dose, pk.err_model, pk.sig_prop, pk.sig_add,
            1.0 / omega_diag, float(np.sum(np.log(omega_diag))),
            pk.map_cl, pk.map_v, pk.map_ka, INNER_TOL, INNER_TOL, INNER_MAX_ITER,
        )
    fun = lambda etas: _inner_values(prob, omega_diag, etas)
    return _newton_minimize(fun, np.asarray(start, dtype=float))


def _ebe_core(prob: SubjectProblem, omega_diag: np.ndarray, warm: np.ndarray | None = None,
              multi_start: bool = True):
    """Posterior-mode eta.

    The default multi-start runs from zero and one perturbed point (guards
    against inner local minima at large omega).  With ``multi_start=False``
    a converged continuation from ``warm`` is returned directly, so the
    solution varies smoothly along the outer optimizer's path; the full
    multi-start remains the fallback whenever the continuation struggles.
    """
    k = prob.n_eta
    if prob.y.size == 0:
        return np.zeros(k), True
    best = None
    if warm is not None and np.all(np.isfinite(warm)):
        x, fx, conv = _solve_eta(prob, omega_diag, warm)
        if conv and not multi_start:
            return x, True
        best = (x, fx, conv)
    for s in (np.zeros(k), 0.5 * np.sqrt(omega_diag)):
        x, fx, conv = _solve_eta(prob, omega_diag, s)
        if best is None or fx < best[1]:
            best = (x, fx, conv)
    return best[0], best[2]


# ---------------------------------------------------------------------------
# FOCE linearization and OFV
# ---------------------------------------------------------------------------

@dataclass
class SubjectFoce:
    """Per-subject linearization pieces at the conditional mode."""

    eta: np.ndarray
    f0: np.ndarray          # prediction at eta-hat
    gmat: np.ndarray        # d f / d eta at eta-hat, (n_obs, n_eta)
    g: np.ndarray           # residual sd at eta-hat (interaction)
    chol: np.ndarray        # lower Cholesky factor of V
    e: np.ndarray           # y - f0 + G eta-hat
    ofv: float
    inner_converged: bool


def _linearize(prob: SubjectProblem, omega_diag: np.ndarray, eta: np.ndarray,
               inner_converged: bool = True) -> SubjectFoce:
    n = prob.y.size
    k = prob.n_eta
    if n == 0:
        return SubjectFoce(eta=eta, f0=np.empty(0), gmat=np.empty((0, k)), g=np.empty(0),
                           chol=np.empty((0, 0)), e=np.empty(0), ofv=0.0,
                           inner_converged=inner_converged)
    steps = GRAD_FD_STEP * np.maximum(1.0, np.abs(eta))
    pts = [eta]
    for i in range(k):
        for sign in (1.0, -1.0):
            p = eta.copy()
            p[i] += sign * steps[i]
            pts.append(p)
    preds = prob.predict(np.array(pts))
    f0 = preds[0]
    gmat = np.empty((n, k))
    for i in range(k):
        gmat[:, i] = (preds[1 + 2 * i] - preds[2 + 2 * i]) / (2 * steps[i])
    g = prob.sd(f0[None, :])[0]

    if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(gmat)) and np.all(np.isfinite(g))):
        raise EvaluationFailure(f"non-finite prediction for subject {prob.subject_id}")

    v = (gmat * omega_diag[None, :]) @ gmat.T + np.diag(g ** 2)
    try:
        chol = np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        raise EvaluationFailure(
            f"linearized covariance not positive definite for subject {prob.subject_id}"
        ) from None
    e = prob.y - f0 + gmat @ eta
    half = np.linalg.solve(chol, e)
    ofv = 2.0 * float(np.sum(np.log(np.diag(chol)))) + float(half @ half)
    if not np.isfinite(ofv):
        raise EvaluationFailure(f"non-finite OFV contribution for subject {prob.subject_id}")
    return SubjectFoce(eta=eta, f0=f0, gmat=gmat, g=g, chol=chol, e=e, ofv=ofv,
                       inner_converged=inner_converged)


def _fast_piece(prob: SubjectProblem, omega_diag: np.ndarray, eta: np.ndarray,
                inner_converged: bool) -> SubjectFoce:
    """OFV-only linearization through the JIT kernel (no GOF matrices kept)."""
    pk = prob.pk
    if prob.y.size == 0:
        ofv, ok = 0.0, True
    else:
        ofv, ok = fp._foce_piece(eta, pk.times, pk.y, pk.base_cl, pk.base_v, pk.base_ka,
                                 pk.f, pk.dose, pk.err_model, pk.sig_prop, pk.sig_add,
                                 omega_diag, pk.map_cl, pk.map_v, pk.map_ka, GRAD_FD_STEP)
    if not ok:
        raise EvaluationFailure(
            f"linearization failed for subject {prob.subject_id}"
        )
    k = prob.n_eta
    return SubjectFoce(eta=eta, f0=np.empty(0), gmat=np.empty((0, k)), g=np.empty(0),
                       chol=np.empty((0, 0)), e=np.empty(0), ofv=ofv,
                       inner_converged=inner_converged)


def _total_ofv(problems: list[SubjectProblem], omega_diag: np.ndarray,
               warm: dict[int, np.ndarray] | None = None,
               multi_start: bool = True,
               ofv_only: bool = False) -> tuple[float, list[SubjectFoce]]:
    """Total OFV, accumulated in subject order (fixed reduction order).

    ``ofv_only`` routes the linearization through the JIT kernel where
    possible, skipping the GOF-sized intermediates the optimizer never uses.
    """
    total = 0.0
    pieces = []
    for idx, prob in enumerate(problems):
        w = warm.get(idx) if warm is not None else None
        eta, conv = _ebe_core(prob, omega_diag, warm=w, multi_start=multi_start)
        if ofv_only and fp.HAVE_NUMBA and prob.pk is not None:
            piece = _fast_piece(prob, omega_diag, eta, conv)
        else:
            piece = _linearize(prob, omega_diag, eta, inner_converged=conv)
        total += piece.ofv
        pieces.append(piece)
        if warm is not None:
            warm[idx] = eta
    return total, pieces


# ---------------------------------------------------------------------------
# Public likelihood operations
# ---------------------------------------------------------------------------

def inner_objective(subject: Subject, ms: ModelSpec, params: ParameterSet, eta) -> float:
    """Conditional objective for one subject at a fixed eta vector.

    Sum over usable rows of (y-f)^2/g^2 + log g^2, plus the prior terms
    eta' Omega^-1 eta + log|Omega|; rows with mdv=1 contribute nothing.
    """
    prob = compile_subject(subject, ms, params)
    omega_diag = _omega_diag(ms, params.omega)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (prob.n_eta,):
        raise ValueError(f"eta must have {prob.n_eta} components")
    value = float(_inner_values(prob, omega_diag, eta[None, :])[0])
    if not np.isfinite(value):
        raise EvaluationFailure(f"non-finite inner objective for subject {subject.subject_id}")
    return value


def estimate_ebe(subject: Subject, ms: ModelSpec, params: ParameterSet) -> EbeEstimate:
    """Posterior-mode (empirical Bayes) eta for one subject.

    Starts from eta = 0 and one perturbed point; a subject with no usable
    observations gets exactly zero.
    """
    prob = compile_subject(subject, ms, params)
    omega_diag = _omega_diag(ms, params.omega)
    eta, conv = _ebe_core(prob, omega_diag)
    return EbeEstimate(eta=eta, converged=conv)


def foce_ofv(ds: StudyDataset, ms: ModelSpec, params: ParameterSet) -> float:
    """FOCE-I objective function value for the whole dataset."""
    problems = compile_dataset(ds, ms, params)
    omega_diag = _omega_diag(ms, params.omega)
    total, _ = _total_ofv(problems, omega_diag)
    return total


# ---------------------------------------------------------------------------
# Parameter packing / transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Entry:
    key: str        # reporting name
    kind: str       # "theta" | "coef" | "omega" | "sigma_prop" | "sigma_add"
    target: str     # field / effect name / eta name

    @property
    def log_scale(self) -> bool:
        return self.kind != "coef"


THETA_KEYS = {"cl_f": "CL_F", "v_f": "V_F", "ka": "KA", "f_large": "F_LARGE"}


def _layout(ms: ModelSpec) -> list[_Entry]:
    entries = []
    for name in ("cl_f", "v_f", "ka", "f_large"):
        if name not in ms.fixed:
            entries.append(_Entry(THETA_KEYS[name], "theta", name))
    for eff in ms.covariate_map:
        if eff.name not in ms.fixed:
            entries.append(_Entry(eff.name, "coef", eff.name))
    for name in ms.etas:
        entries.append(_Entry(f"OMEGA_{name.upper()}", "omega", name))
    if ms.error_model in ("proportional", "combined"):
        entries.append(_Entry("SIGMA_PROP", "sigma_prop", "prop"))
    if ms.error_model in ("additive", "combined"):
        entries.append(_Entry("SIGMA_ADD", "sigma_add", "add"))
    return entries


def _effect_by_name(ms: ModelSpec, name: str) -> CovariateEffect:
    for eff in ms.covariate_map:
        if eff.name == name:
            return eff
    raise KeyError(name)


def _pack(ms: ModelSpec, params: ParameterSet) -> np.ndarray:
    x = []
    for entry in _layout(ms):
        if entry.kind == "theta":
            v = getattr(params.theta, entry.target)
        elif entry.kind == "coef":
            v = params.theta.coefficient(_effect_by_name(ms, entry.target))
        elif entry.kind == "omega":
            v = params.omega.variance(entry.target)
        else:
            v = getattr(params.sigma, entry.target)
        x.append(math.log(v) if entry.log_scale else v)
    return np.array(x, dtype=float)


def _unpack(ms: ModelSpec, x: np.ndarray, template: ParameterSet) -> ParameterSet:
    theta_fields = {name: getattr(template.theta, name)
                    for name in ("cl_f", "v_f", "ka", "wt_exp", "f_large")}
    extra = dict(template.theta.extra)
    omega_fields = {"cl": template.omega.cl, "v": template.omega.v, "ka": template.omega.ka}
    sigma_fields = {"prop": template.sigma.prop, "add": template.sigma.add}
    coef_updates = {}
    for entry, xi in zip(_layout(ms), x):
        value = math.exp(xi) if entry.log_scale else float(xi)
        if entry.kind == "theta":
            theta_fields[entry.target] = value
        elif entry.kind == "coef":
            coef_updates[entry.target] = value
        elif entry.kind == "omega":
            omega_fields[entry.target] = value
        else:
            sigma_fields[entry.target] = value
    theta = ThetaVector(cl_f=theta_fields["cl_f"], v_f=theta_fields["v_f"],
                        ka=theta_fields["ka"], wt_exp=theta_fields["wt_exp"],
                        f_large=theta_fields["f_large"], extra=tuple(sorted(extra.items())))
    for name, value in coef_updates.items():
        theta = theta.with_coefficient(_effect_by_name(ms, name), value)
    omega = OmegaMatrix(**omega_fields)
    sigma = SigmaParams(model=ms.error_model, prop=sigma_fields["prop"], add=sigma_fields["add"])
    return ParameterSet(theta=theta, omega=omega, sigma=sigma)


def _reported(entry: _Entry, natural: float) -> float:
    """Natural value -> reporting scale (omega and sigma_prop as CV%)."""
    if entry.kind == "omega":
        return 100.0 * math.sqrt(natural)
    if entry.kind == "sigma_prop":
        return 100.0 * natural
    return natural


def _reported_se(entry: _Entry, reported_value: float, se_x: float) -> float:
    """Delta-method SE on the reporting scale from the transformed-space SE."""
    if entry.kind == "coef":
        return se_x
    if entry.kind == "omega":
        return 0.5 * reported_value * se_x  # d(100 e^{x/2})/dx
    return reported_value * se_x            # d(c e^x)/dx


def reported_estimates(ms: ModelSpec, params: ParameterSet) -> dict[str, float]:
    x = _pack(ms, params)
    out = {}
    for entry, xi in zip(_layout(ms), x):
        natural = math.exp(xi) if entry.log_scale else xi
        out[entry.key] = _reported(entry, natural)
    return out


# ---------------------------------------------------------------------------
# Shrinkage helpers (reused by diagnostics)
# ---------------------------------------------------------------------------

def eta_shrinkage(ebes: np.ndarray, omega_variances: np.ndarray) -> np.ndarray:
    """1 - SD(eta-hat)/omega per column; SD uses the n-1 denominator.

    NaN where the omega variance is zero (undefined).
    """
    ebes = np.atleast_2d(np.asarray(ebes, dtype=float))
    omega_variances = np.asarray(omega_variances, dtype=float)
    out = np.full(omega_variances.shape, np.nan)
    if ebes.shape[0] >= 2:
        sd = np.std(ebes, axis=0, ddof=1)
    else:
        sd = np.zeros(omega_variances.shape)
    ok = omega_variances > 0
    out[ok] = 1.0 - sd[ok] / np.sqrt(omega_variances[ok])
    return out


def eps_shrinkage(iwres: np.ndarray) -> float:
    """1 - SD(IWRES) with the n-1 denominator."""
    iwres = np.asarray(iwres, dtype=float)
    if iwres.size < 2:
        return float("nan")
    return float(1.0 - np.std(iwres, ddof=1))


# ---------------------------------------------------------------------------
# Outer estimation
# ---------------------------------------------------------------------------

@dataclass
class _SearchOutcome:
    x: np.ndarray
    f: float
    grad: np.ndarray
    converged: bool
    message: str
    n_iterations: int


def _central_gradient(fun, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences, rel step 1e-4.

    The step is deliberately coarse: objective values carry ~1e-8 jitter
    from the inner eta-solve termination, and the gradient convergence test
    needs the difference quotients to sit well above that floor."""
    grad = np.empty(x.size)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return grad


def _bfgs_minimize(fun, x0: np.ndarray, refresh=None, grad_tol: float = 1e-3,
                   ofv_rel_tol: float = 1e-6, max_evals: int = 5000,
                   bound: float = TRANSFORM_BOUND, eval_counter=None) -> _SearchOutcome:
    """Dense BFGS with Armijo backtracking and forward-difference gradients.

    The FOCE objective is piecewise smooth (per-subject conditional modes
    can switch basins), so the line search demands only simple decrease;
    the inverse-Hessian update is skipped whenever the curvature pair is
    unusable, and the search direction falls back to steepest descent when
    the model turns non-descending.  ``refresh`` is invoked with the new
    iterate after every accepted step.

    Convergence requires the gradient max-norm below ``grad_tol`` and the
    last relative objective change below ``ofv_rel_tol``.
    """
    n = x0.size
    evals = eval_counter if eval_counter is not None else (lambda: 0)
    x = np.clip(np.array(x0, dtype=float), -bound, bound)
    f = fun(x)
    hinv = np.eye(n)
    scaled = False
    grad = _central_gradient(fun, x)
    rel_change = np.inf
    message = "max evaluations exceeded"
    converged = False
    iteration = 0

    while evals() < max_evals:
        iteration += 1
        gmax = float(np.max(np.abs(grad)))
        if gmax <= grad_tol and rel_change <= ofv_rel_tol:
            converged = True
            message = "gradient and objective-change criteria met"
            break

        direction = -hinv @ grad
        slope = float(grad @ direction)
        if not np.isfinite(slope) or slope >= 0:
            hinv = np.eye(n)
            direction = -grad
            slope = float(grad @ direction)
        dnorm = float(np.linalg.norm(direction))
        if dnorm > 2.0:  # cap steps in transformed space
            direction *= 2.0 / dnorm
            slope = float(grad @ direction)

        alpha = 1.0
        accepted = False
        for _ in range(30):
            x_new = np.clip(x + alpha * direction, -bound, bound)
            f_new = fun(x_new)
            if f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted and not np.array_equal(direction, -grad):
            # steepest-descent rescue through the same backtracking
            direction = -grad / max(1.0, np.linalg.norm(grad))
            slope = float(grad @ direction)
            alpha = 1.0
            for _ in range(30):
                x_new = np.clip(x + alpha * direction, -bound, bound)
                f_new = fun(x_new)
                if f_new <= f + 1e-4 * alpha * slope:
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            converged = gmax <= grad_tol
            message = ("no further decrease along descent directions"
                       if not converged else
                       "gradient criterion met at a line-search stall")
            break

        if refresh is not None:
            refresh(x_new)
            f_refreshed = fun(x_new)
            f_new = min(f_new, f_refreshed)
        grad_new = _central_gradient(fun, x_new)

        s = x_new - x
        yv = grad_new - grad
        sy = float(s @ yv)
        if np.isfinite(sy) and sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            if not scaled:
                hinv = (sy / float(yv @ yv)) * np.eye(n)
                scaled = True
            rho = 1.0 / sy
            outer_sy = np.outer(s, yv)
            hinv = (np.eye(n) - rho * outer_sy) @ hinv @ (np.eye(n) - rho * outer_sy.T) \
                + rho * np.outer(s, s)

        rel_change = (f - f_new) / max(1.0, abs(f_new))
        x, f, grad = x_new, f_new, grad_new

    return _SearchOutcome(x=x, f=f, grad=grad, converged=converged, message=message,
                          n_iterations=iteration)


def _newton_polish(objective, outcome: _SearchOutcome, grad_tol: float,
                   ofv_rel_tol: float, max_rounds: int = 4) -> _SearchOutcome:
    """Full-Newton finishing steps on the finite-difference OFV Hessian.

    The quasi-Newton search can stall a whisker short of the gradient
    criterion when the Hessian is strongly anisotropic and the remaining
    improvement sits near the objective's noise floor; a few damped Newton
    steps with the exact (FD) curvature settle it.
    """
    x, f, grad = outcome.x, outcome.f, outcome.grad
    converged = outcome.converged
    message = outcome.message
    n = x.size
    for _ in range(max_rounds):
        if float(np.max(np.abs(grad))) <= grad_tol:
            converged = True
            message = "gradient criterion met after Newton polish"
            break
        try:
            hess = _ofv_hessian(objective, x)
        except EvaluationFailure:
            break
        lam = 0.0
        for _ in range(10):
            try:
                np.linalg.cholesky(hess + lam * np.eye(n))
                break
            except np.linalg.LinAlgError:
                lam = max(2.0 * lam, 1e-6) * 10.0
        step = np.linalg.solve(hess + lam * np.eye(n), -grad)
        norm = float(np.linalg.norm(step))
        if norm > 1.0:
            step *= 1.0 / norm
        predicted_drop = -float(grad @ step) / 2.0
        improved = False
        if predicted_drop <= 1e-5:
            # Remaining improvement is at or below the objective's noise
            # floor: take the full step if it is value-neutral and let the
            # gradient test decide.
            x_new = x + step
            f_new = objective(x_new)
            improved = f_new <= f + 1e-5
        else:
            alpha = 1.0
            for _ in range(12):
                x_new = x + alpha * step
                f_new = objective(x_new)
                if f_new < f:
                    improved = True
                    break
                alpha *= 0.5
        if not improved:
            break
        rel = abs(f - f_new) / max(1.0, abs(f_new))
        x, f = x_new, f_new
        grad = _central_gradient(objective, x)
        if float(np.max(np.abs(grad))) <= grad_tol and rel <= ofv_rel_tol:
            converged = True
            message = "gradient and objective-change criteria met after Newton polish"
            break
    return _SearchOutcome(x=x, f=f, grad=grad, converged=converged, message=message,
                          n_iterations=outcome.n_iterations)


class _Objective:
    """Wrapped OFV over transformed parameters.

    Inner eta modes are continued from a frozen per-subject cache, so
    between refreshes the objective is a pure, deterministic function of
    ``x``: finite-difference probes and line-search trials along a ray stay
    mutually consistent.  ``refresh`` (wired to the quasi-Newton iteration
    callback) re-solves the modes with the full multi-start guard at the
    current iterate and commits them as the new cache.
    """

    def __init__(self, ds: StudyDataset, ms: ModelSpec, template: ParameterSet):
        self.ds = ds
        self.ms = ms
        self.template = template
        self.frozen: dict[int, np.ndarray] = {}
        self.n_evals = 0

    def _evaluate(self, x: np.ndarray, warm: dict, multi_start: bool) -> float:
        self.n_evals += 1
        try:
            params = _unpack(self.ms, x, self.template)
            problems = compile_dataset(self.ds, self.ms, params)
            omega_diag = _omega_diag(self.ms, params.omega)
            total, _ = _total_ofv(problems, omega_diag, warm=warm, multi_start=multi_start,
                                  ofv_only=True)
        except (EvaluationFailure, ValueError, OverflowError):
            return PENALTY_OFV
        return total if np.isfinite(total) else PENALTY_OFV

    def __call__(self, x: np.ndarray) -> float:
        return self._evaluate(x, warm=dict(self.frozen), multi_start=False)

    def refresh(self, x: np.ndarray) -> None:
        self._evaluate(x, warm=self.frozen, multi_start=True)


def fit(ds: StudyDataset, ms: ModelSpec, init: ParameterSet,
        settings: FitSettings = FitSettings()) -> FitResult:
    """Estimate population parameters by minimizing the FOCE-I OFV.

    Positive parameters are searched in log space; covariate coefficients
    are unconstrained.  Convergence requires the quasi-Newton search to
    terminate regularly with the projected gradient below ``grad_tol``.
    """
    objective = _Objective(ds, ms, init)
    x0 = _pack(ms, init)
    # Evaluate the initial point outside the penalty wrapper so genuine
    # configuration errors surface with their own message.
    problems0 = compile_dataset(ds, ms, init)
    f0, _ = _total_ofv(problems0, _omega_diag(ms, init.omega), warm=objective.frozen)
    objective.n_evals += 1
    if not np.isfinite(f0):
        raise ValueError("initial parameters give a non-finite OFV")

    entries = _layout(ms)
    res = _bfgs_minimize(
        objective,
        x0,
        refresh=objective.refresh,
        grad_tol=settings.grad_tol,
        ofv_rel_tol=settings.ofv_rel_tol,
        max_evals=settings.max_evals,
        eval_counter=lambda: objective.n_evals,
    )
    if not res.converged and objective.n_evals < settings.max_evals \
            and float(np.max(np.abs(res.grad))) <= 100 * settings.grad_tol:
        objective.refresh(res.x)
        res = _newton_polish(objective, res, settings.grad_tol, settings.ofv_rel_tol)
    final_params = _unpack(ms, res.x, objective.template)

    # Fresh pass (no warm cache) so reported OFV/EBEs are pure functions of
    # the final estimates.
    problems = compile_dataset(ds, ms, final_params)
    omega_diag = _omega_diag(ms, final_params.omega)
    final_ofv, pieces = _total_ofv(problems, omega_diag)

    converged = res.converged and final_ofv < PENALTY_OFV
    message = res.message

    ebes = {p.subject_id: piece.eta for p, piece in zip(problems, pieces)}
    flagged = tuple(p.subject_id for p, piece in zip(problems, pieces)
                    if not piece.inner_converged)

    iwres_all = []
    for prob, piece in zip(problems, pieces):
        if prob.y.size:
            iwres_all.append((prob.y - piece.f0) / piece.g)
    iwres_all = np.concatenate(iwres_all) if iwres_all else np.empty(0)
    ebes_mat = np.array([pieces[i].eta for i in range(len(pieces))])
    shr = eta_shrinkage(ebes_mat, omega_diag) if len(pieces) else np.full(len(ms.etas), np.nan)
    eta_shr = {name: float(shr[i]) for i, name in enumerate(ms.etas)}

    result = FitResult(
        params=final_params,
        ofv=final_ofv,
        converged=converged,
        n_function_evals=objective.n_evals,
        message=message,
        param_names=tuple(e.key for e in entries),
        estimates=reported_estimates(ms, final_params),
        se={},
        ebes=ebes,
        eta_names=ms.etas,
        eta_shrinkage=eta_shr,
        eps_shrinkage=eps_shrinkage(iwres_all),
        flagged_subjects=flagged,
    )
    if settings.compute_se and converged:
        try:
            result.se = standard_errors(ds, ms, result)
        except EvaluationFailure as exc:
            result.message += f"; SE computation failed: {exc}"
    return result


def _ofv_hessian(objective, x: np.ndarray) -> np.ndarray:
    """Central-difference Hessian in transformed space, relative step 1e-4."""
    n = x.size
    h = HESS_FD_STEP * np.maximum(1.0, np.abs(x))
    f0 = objective(x)
    hess = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        fp = objective(x + ei)
        fm = objective(x - ei)
        hess[i, i] = (fp - 2 * f0 + fm) / h[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h[i]
            ej[j] = h[j]
            fpp = objective(x + ei + ej)
            fpm = objective(x + ei - ej)
            fmp = objective(x - ei + ej)
            fmm = objective(x - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
    if np.any(np.abs(hess) >= PENALTY_OFV / 100):
        raise EvaluationFailure("Hessian evaluation hit rejected parameter vectors")
    return hess


def standard_errors(ds: StudyDataset, ms: ModelSpec, result: FitResult) -> dict[str, ParamUncertainty]:
    """Asymptotic SE/RSE/CI per estimated parameter on the reporting scale.

    Covariance is 2 * H^-1 with H the central-difference Hessian of the OFV
    in transformed space; SEs are back-transformed by the delta method.
    """
    if not result.converged:
        raise ValueError("standard errors require a converged fit")
    objective = _Objective(ds, ms, result.params)
    x = _pack(ms, result.params)
    objective.refresh(x)  # seed the eta cache at the solution
    hess = _ofv_hessian(objective, x)
    try:
        cov = 2.0 * np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        raise EvaluationFailure("OFV Hessian is singular") from None
    var = np.diag(cov)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise EvaluationFailure("OFV Hessian is not positive definite")
    se_x = np.sqrt(var)

    out = {}
    for entry, xi, si in zip(_layout(ms), x, se_x):
        natural = math.exp(xi) if entry.log_scale else xi
        rep = _reported(entry, natural)
        se = _reported_se(entry, rep, si)
        rse = 100.0 * se / abs(rep) if rep != 0 else float("inf")
        out[entry.key] = ParamUncertainty(
            estimate=rep,
            se=se,
            rse_percent=rse,
            ci95=(rep - 1.96 * se, rep + 1.96 * se),
        )
    return out


# ---------------------------------------------------------------------------
# Covariate search
# ---------------------------------------------------------------------------

FORMS = ("linear", "power", "exponential")


@dataclass(frozen=True)
class SearchStep:
    phase: str              # "forward" | "backward"
    round: int
    effect: str
    delta_ofv: float | None
    threshold: float
    accepted: bool          # forward: included; backward: retained
    converged: bool
    note: str = ""


@dataclass
class SearchResult:
    model: ModelSpec
    fit: FitResult
    added: tuple[CovariateEffect, ...]
    trace: tuple[SearchStep, ...]


def _default_reference(ds: StudyDataset, covariate: str) -> float:
    if covariate == "wt":
        return 15.0
    values = [s.covariate(covariate) for s in ds.subjects if s.covariate(covariate) is not None]
    if not values:
        return 0.0
    if set(values) <= {0, 1}:
        return 0.0
    return float(np.median(values))


def covariate_search(ds: StudyDataset, base: ModelSpec, init: ParameterSet,
                     candidates: list[tuple[str, str]],
                     forward_threshold: float = 3.84,
                     backward_threshold: float = 3.84,
                     settings: FitSettings = FitSettings(compute_se=False)) -> SearchResult:
    """Forward-inclusion / backward-elimination covariate selection.

    Every candidate (parameter, covariate) pair is tried with linear, power
    and exponential forms at each forward round; the best relationship is
    added when its OFV drop reaches ``forward_threshold``.  Backward
    elimination then removes any added relationship whose removal costs
    less than ``backward_threshold``.  Candidate fits that fail are
    recorded in the trace and skipped.
    """
    settings = replace(settings, compute_se=False)
    current_ms = base
    current_fit = fit(ds, current_ms, init, settings)
    if not current_fit.converged:
        raise ValueError("base model fit did not converge; cannot run covariate search")

    trace: list[SearchStep] = []
    added: list[CovariateEffect] = []
    remaining = list(candidates)
    round_no = 0

    while remaining:
        round_no += 1
        best = None  # (delta, effect, fit_result)
        round_steps = []
        for (parameter, covariate) in remaining:
            for form in FORMS:
                eff = CovariateEffect(parameter, covariate, form,
                                      _default_reference(ds, covariate))
                if any(e.name == eff.name for e in current_ms.covariate_map):
                    continue
                cand_ms = current_ms.with_effect(eff)
                cand_init = ParameterSet(
                    theta=current_fit.theta.with_coefficient(eff, 0.0),
                    omega=current_fit.omega,
                    sigma=current_fit.sigma,
                )
                try:
                    cand_fit = fit(ds, cand_ms, cand_init, settings)
                except (ValueError, EvaluationFailure) as exc:
                    round_steps.append(SearchStep("forward", round_no, eff.name, None,
                                                  forward_threshold, False, False, str(exc)))
                    continue
                delta = current_fit.ofv - cand_fit.ofv
                round_steps.append(SearchStep("forward", round_no, eff.name, delta,
                                              forward_threshold, False, cand_fit.converged))
                if not cand_fit.converged:
                    continue
                if best is None or delta > best[0]:
                    best = (delta, eff, cand_fit)
        if best is not None and best[0] >= forward_threshold:
            delta, eff, cand_fit = best
            round_steps = [
                replace(s, accepted=True) if s.effect == eff.name and s.phase == "forward"
                and s.round == round_no else s
                for s in round_steps
            ]
            trace.extend(round_steps)
            current_ms = current_ms.with_effect(eff)
            current_fit = cand_fit
            added.append(eff)
            remaining = [c for c in remaining if c != (eff.parameter, eff.covariate)]
        else:
            trace.extend(round_steps)
            break

    # Backward elimination over the relationships added above.
    changed = True
    bw_round = 0
    while changed and added:
        changed = False
        bw_round += 1
        for eff in list(added):
            reduced_ms = current_ms.without_effect(eff)
            reduced_init = ParameterSet(theta=current_fit.theta, omega=current_fit.omega,
                                        sigma=current_fit.sigma)
            try:
                reduced_fit = fit(ds, reduced_ms, reduced_init, settings)
            except (ValueError, EvaluationFailure) as exc:
                trace.append(SearchStep("backward", bw_round, eff.name, None,
                                        backward_threshold, True, False, str(exc)))
                continue
            increase = reduced_fit.ofv - current_fit.ofv
            keep = not reduced_fit.converged or increase >= backward_threshold
            trace.append(SearchStep("backward", bw_round, eff.name, increase,
                                    backward_threshold, keep, reduced_fit.converged))
            if not keep:
                current_ms = reduced_ms
                current_fit = reduced_fit
                added.remove(eff)
                changed = True
                break

    return SearchResult(model=current_ms, fit=current_fit, added=tuple(added),
                        trace=tuple(trace))
