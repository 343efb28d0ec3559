"""One-compartment first-order-absorption model with covariates and error models.

Parameterization is apparent (CL/F, V/F) with the low-volume group as the
bioavailability reference (F=1); the high-volume group gets the relative
bioavailability ``f_large``.  Between-subject variability is log-normal,
``P_i = P_pop * exp(eta)``.  Clearance carries a power-of-weight covariate
centered at 15 kg in the standard model; further covariate effects can be
attached through :class:`CovariateEffect`.

Everything here is pure and reentrant; array arguments broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ThetaVector",
    "OmegaMatrix",
    "SigmaParams",
    "IndividualParams",
    "ExposureMetrics",
    "CovariateEffect",
    "WEIGHT_ON_CL",
    "individual_params",
    "concentration",
    "concentration_profile",
    "error_sd",
    "exposure_metrics",
    "ERROR_SD_FLOOR",
    "DEFAULT_UNBOUND_FRACTION",
]

REFERENCE_WEIGHT_KG = 15.0
ERROR_SD_FLOOR = 1e-10  # mg/L; keeps the likelihood finite at pred = 0
KA_KE_DEGENERATE_RTOL = 1e-8
DEFAULT_UNBOUND_FRACTION = 0.01


@dataclass(frozen=True)
class CovariateEffect:
    """A multiplicative covariate relationship on a structural parameter.

    forms (x = covariate value, c = reference, b = coefficient):
      power        (x/c)**b
      linear       1 + b*(x - c)
      exponential  exp(b*(x - c))
    """

    parameter: str  # "cl" | "v" | "ka"
    covariate: str  # "wt" | "age" | "sex" | "volgrp" | "aag"
    form: str       # "power" | "linear" | "exponential"
    reference: float

    def __post_init__(self):
        if self.parameter not in ("cl", "v", "ka"):
            raise ValueError(f"unknown parameter {self.parameter!r}")
        if self.form not in ("power", "linear", "exponential"):
            raise ValueError(f"unknown covariate form {self.form!r}")

    @property
    def name(self) -> str:
        return f"{self.parameter}~{self.covariate}:{self.form}"

    def multiplier(self, value, coefficient):
        """Multiplier the effect applies; missing covariate values are neutral."""
        if value is None:
            value = self.reference
        x = np.asarray(value, dtype=float)
        if self.form == "power":
            if self.reference <= 0:
                raise ValueError(f"power form needs a positive reference, got {self.reference}")
            if np.any(x <= 0):
                raise ValueError(f"power form needs positive {self.covariate} values")
            return (x / self.reference) ** coefficient
        if self.form == "linear":
            return 1.0 + coefficient * (x - self.reference)
        return np.exp(coefficient * (x - self.reference))


# Canonical weight-power-on-clearance relationship of the standard model;
# its coefficient lives in the named ThetaVector slot ``wt_exp``.
WEIGHT_ON_CL = CovariateEffect("cl", "wt", "power", REFERENCE_WEIGHT_KG)


@dataclass(frozen=True)
class ThetaVector:
    """Fixed effects: typical values, the weight exponent on CL/F, and the
    high-volume-group relative bioavailability.  Extra coefficients added by
    covariate search live in ``extra`` keyed by :attr:`CovariateEffect.name`.
    """

    cl_f: float          # L/min
    v_f: float           # L
    ka: float            # 1/min
    wt_exp: float = 0.0
    f_large: float = 1.0
    extra: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        for name in ("cl_f", "v_f", "ka", "f_large"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def coefficient(self, effect: CovariateEffect) -> float:
        if (effect.parameter, effect.covariate, effect.form) == ("cl", "wt", "power"):
            return self.wt_exp
        for name, value in self.extra:
            if name == effect.name:
                return value
        raise KeyError(f"no coefficient for covariate effect {effect.name!r}")

    def with_coefficient(self, effect: CovariateEffect, value: float) -> "ThetaVector":
        if (effect.parameter, effect.covariate, effect.form) == ("cl", "wt", "power"):
            return ThetaVector(self.cl_f, self.v_f, self.ka, value, self.f_large, self.extra)
        extra = tuple((n, v) for n, v in self.extra if n != effect.name)
        return ThetaVector(self.cl_f, self.v_f, self.ka, self.wt_exp, self.f_large,
                           extra + ((effect.name, value),))


@dataclass(frozen=True)
class OmegaMatrix:
    """Diagonal between-subject variances (variance scale, not CV)."""

    cl: float = 0.0
    v: float = 0.0
    ka: float = 0.0

    def __post_init__(self):
        for name in ("cl", "v", "ka"):
            if getattr(self, name) < 0:
                raise ValueError(f"omega^2 for {name} must be >= 0")

    def variance(self, eta_name: str) -> float:
        return getattr(self, eta_name)

    def cv_percent(self, eta_name: str) -> float:
        return 100.0 * math.sqrt(self.variance(eta_name))


@dataclass(frozen=True)
class SigmaParams:
    """Residual error model: additive sd (mg/L), proportional CV, or both.

    Inactive components must be exactly 0.  Active components may be 0
    here (noiseless simulation); estimation additionally requires them to
    be strictly positive.
    """

    model: str  # "additive" | "proportional" | "combined"
    prop: float = 0.0
    add: float = 0.0

    def __post_init__(self):
        if self.model not in ("additive", "proportional", "combined"):
            raise ValueError(f"unknown error model {self.model!r}")
        if self.prop < 0 or self.add < 0:
            raise ValueError("error components must be >= 0")
        if self.model == "additive" and self.prop != 0:
            raise ValueError("proportional component must be exactly 0 under additive error")
        if self.model == "proportional" and self.add != 0:
            raise ValueError("additive component must be exactly 0 under proportional error")

    def active_positive(self) -> bool:
        if self.model in ("proportional", "combined") and self.prop <= 0:
            return False
        if self.model in ("additive", "combined") and self.add <= 0:
            return False
        return True


@dataclass(frozen=True)
class IndividualParams:
    """Subject-level parameters after covariates and random effects."""

    cl: float
    v: float
    ka: float
    f: float = 1.0

    def __post_init__(self):
        for name in ("cl", "v", "ka", "f"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def ke(self) -> float:
        return self.cl / self.v


@dataclass(frozen=True)
class ExposureMetrics:
    auc: float     # mg*min/L
    cmax: float    # mg/L
    tmax: float    # min
    cu_max: float  # ug/L, unbound


def individual_params(theta: ThetaVector, covariates, eta,
                      effects: tuple[CovariateEffect, ...] = (WEIGHT_ON_CL,)) -> IndividualParams:
    """Subject parameters from fixed effects, covariates and an eta vector.

    ``covariates`` is anything exposing ``wt``, ``volgrp`` (and any further
    covariate an active effect references, lower-case) as attributes --
    a :class:`poppk.dataset.Subject` works.  ``eta`` is (eta_cl, eta_v, eta_ka).
    """
    wt = covariates.wt
    if wt is None or wt <= 0:
        raise ValueError(f"weight must be positive, got {wt}")
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (3,):
        raise ValueError("eta must have three components (cl, v, ka)")
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta components must be finite")

    mult = {"cl": 1.0, "v": 1.0, "ka": 1.0}
    for effect in effects:
        value = getattr(covariates, effect.covariate)
        mult[effect.parameter] *= float(effect.multiplier(value, theta.coefficient(effect)))

    cl = theta.cl_f * mult["cl"] * math.exp(eta[0])
    v = theta.v_f * mult["v"] * math.exp(eta[1])
    ka = theta.ka * mult["ka"] * math.exp(eta[2])
    f = 1.0 if covariates.volgrp == 0 else theta.f_large
    return IndividualParams(cl=cl, v=v, ka=ka, f=f)


def concentration_profile(t, dose, cl, v, ka, f=1.0):
    """Concentration (mg/L) at times ``t`` for a single depot bolus; broadcasts.

    C(t) = F*D*Ka / (V*(Ka-Ke)) * (exp(-Ke*t) - exp(-Ka*t)), with the
    analytic limit F*D*Ke*t/V * exp(-Ke*t) when Ka ~= Ke.  The general
    branch is written with expm1 so it stays accurate arbitrarily close to
    the degenerate line.
    """
    t = np.asarray(t, dtype=float)
    cl = np.asarray(cl, dtype=float)
    v = np.asarray(v, dtype=float)
    ka = np.asarray(ka, dtype=float)
    f = np.asarray(f, dtype=float)
    dose = np.asarray(dose, dtype=float)

    ke = cl / v
    diff = ka - ke
    near = np.abs(diff) < KA_KE_DEGENERATE_RTOL * ke
    safe_diff = np.where(near, 1.0, diff)
    # exp(-ke t) - exp(-ka t) = -exp(-ke t) * expm1(-(ka-ke) t)
    general = (f * dose * ka) / (v * safe_diff) * (-np.exp(-ke * t) * np.expm1(-diff * t))
    limit = (f * dose * ke * t / v) * np.exp(-ke * t)
    out = np.where(near, limit, general)
    return out if out.ndim else float(out)


def concentration(t, dose: float, p: IndividualParams):
    """Concentration at time(s) ``t`` (minutes) after a bolus of ``dose`` mg."""
    if dose < 0:
        raise ValueError("dose must be >= 0")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be >= 0")
    return concentration_profile(t, dose, p.cl, p.v, p.ka, p.f)


def error_sd(pred, sigma: SigmaParams):
    """Residual standard deviation at prediction ``pred``; floored, broadcasts."""
    pred = np.asarray(pred, dtype=float)
    if sigma.model == "additive":
        sd = np.full(pred.shape, sigma.add)
    elif sigma.model == "proportional":
        sd = pred * sigma.prop
    else:
        sd = np.sqrt(sigma.add ** 2 + (pred * sigma.prop) ** 2)
    sd = np.maximum(sd, ERROR_SD_FLOOR)
    return sd if sd.ndim else float(sd)


def exposure_metrics(p: IndividualParams, dose: float,
                     fu: float = DEFAULT_UNBOUND_FRACTION) -> ExposureMetrics:
    """Closed-form single-dose exposures: AUC, Cmax, tmax and unbound Cmax.

    AUC = F*D / CL (the group bioavailability folded into the apparent
    clearance), tmax = ln(Ka/Ke)/(Ka-Ke) with the limit 1/Ke when Ka ~= Ke,
    Cmax = C(tmax), Cu,max = Cmax * fu in ug/L.
    """
    if dose <= 0:
        raise ValueError("dose must be positive")
    if fu <= 0:
        raise ValueError("unbound fraction must be positive")
    ke = p.ke
    auc = p.f * dose / p.cl
    if abs(p.ka - ke) < KA_KE_DEGENERATE_RTOL * ke:
        tmax = 1.0 / ke
    else:
        tmax = math.log(p.ka / ke) / (p.ka - ke)
    cmax = float(concentration_profile(tmax, dose, p.cl, p.v, p.ka, p.f))
    return ExposureMetrics(auc=auc, cmax=cmax, tmax=tmax, cu_max=cmax * fu * 1000.0)
