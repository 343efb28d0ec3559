"""Per-subject exposure metrics from empirical Bayes estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import StudyDataset
from .estimate import (
    FitResult,
    ModelSpec,
    ParameterSet,
    _ebe_core,
    _omega_diag,
    compile_subject,
    subject_individual_params,
)
from .model import DEFAULT_UNBOUND_FRACTION, exposure_metrics

__all__ = ["SubjectExposure", "subject_exposures", "exposure_table", "format_summary"]


@dataclass(frozen=True)
class SubjectExposure:
    subject_id: int
    auc: float      # mg*min/L
    cmax: float     # mg/L
    tmax: float     # min
    cu_max: float   # ug/L


def subject_exposures(ds: StudyDataset, ms: ModelSpec, fit_or_params,
                      fu: float = DEFAULT_UNBOUND_FRACTION) -> list[SubjectExposure]:
    """Closed-form AUC/Cmax/tmax/Cu,max per subject at the conditional modes."""
    if isinstance(fit_or_params, FitResult):
        params = fit_or_params.params
        ebes = fit_or_params.ebes
    else:
        params = fit_or_params
        ebes = None
    omega_diag = _omega_diag(ms, params.omega)
    out = []
    for subject in ds.subjects:
        if ebes is not None and subject.subject_id in ebes:
            eta = np.asarray(ebes[subject.subject_id], dtype=float)
        else:
            eta, _ = _ebe_core(compile_subject(subject, ms, params), omega_diag)
        p = subject_individual_params(subject, ms, params, eta)
        m = exposure_metrics(p, subject.dose_amount, fu=fu)
        out.append(SubjectExposure(subject_id=subject.subject_id, auc=m.auc,
                                   cmax=m.cmax, tmax=m.tmax, cu_max=m.cu_max))
    return out


def format_summary(values, digits: int = 3) -> str:
    """Median [Q1 - Q3] layout used in study demographic tables."""
    arr = np.asarray(values, dtype=float)
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75])
    fmt = f"%.{digits}g"
    return f"{fmt % med} [{fmt % q1} - {fmt % q3}]"


def exposure_table(exposures: list[SubjectExposure]) -> dict[str, dict[str, float | str]]:
    """Per-metric median and quartiles across subjects."""
    table = {}
    for metric in ("auc", "cmax", "tmax", "cu_max"):
        values = np.array([getattr(e, metric) for e in exposures], dtype=float)
        q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        table[metric] = {
            "median": float(med),
            "q1": float(q1),
            "q3": float(q3),
            "summary": format_summary(values),
        }
    return table
