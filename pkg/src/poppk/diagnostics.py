"""Goodness-of-fit quantities for a completed fit: PRED/IPRED, residuals, shrinkage.

CWRES reuses the exact FOCE-I linearization of the estimator (same
covariance and residual construction as the OFV), so residuals and
objective are internally consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import StudyDataset
from .estimate import (
    EvaluationFailure,
    FitResult,
    ModelSpec,
    ParameterSet,
    _ebe_core,
    _linearize,
    _omega_diag,
    compile_subject,
    eps_shrinkage,
    eta_shrinkage,
)

__all__ = ["GofRow", "predictions", "cwres", "shrinkage", "ShrinkageReport", "gof_table"]


@dataclass(frozen=True)
class GofRow:
    subject_id: int
    time: float
    dv: float
    pred: float
    ipred: float
    iwres: float
    cwres: float


@dataclass(frozen=True)
class ShrinkageReport:
    eta: dict[str, float]    # raw fractions per random effect
    eps: float

    def eta_percent(self) -> dict[str, float]:
        return {k: 100.0 * min(max(v, 0.0), 1.0) for k, v in self.eta.items()}

    def eps_percent(self) -> float:
        return 100.0 * min(max(self.eps, 0.0), 1.0)


def _params_of(fit_or_params) -> ParameterSet:
    if isinstance(fit_or_params, FitResult):
        return fit_or_params.params
    return fit_or_params


def _subject_pieces(ds: StudyDataset, ms: ModelSpec, params: ParameterSet,
                    ebes: dict[int, np.ndarray] | None):
    omega_diag = _omega_diag(ms, params.omega)
    for subject in ds.subjects:
        prob = compile_subject(subject, ms, params)
        if ebes is not None and subject.subject_id in ebes:
            eta = np.asarray(ebes[subject.subject_id], dtype=float)
        else:
            eta, _ = _ebe_core(prob, omega_diag)
        try:
            piece = _linearize(prob, omega_diag, eta)
        except EvaluationFailure as exc:
            raise EvaluationFailure(f"subject {subject.subject_id}: {exc}") from None
        yield subject, prob, piece


def predictions(ds: StudyDataset, ms: ModelSpec, fit_or_params) -> list[GofRow]:
    """GOF rows for every usable observation: PRED (eta=0), IPRED (eta-hat),
    IWRES, and CWRES from the FOCE linearization at the same estimates."""
    params = _params_of(fit_or_params)
    ebes = fit_or_params.ebes if isinstance(fit_or_params, FitResult) else None
    rows: list[GofRow] = []
    for subject, prob, piece in _subject_pieces(ds, ms, params, ebes):
        n = prob.y.size
        if n == 0:
            continue
        k = prob.n_eta
        pred = prob.predict(np.zeros((1, k)))[0]
        ipred = piece.f0
        iwres = (prob.y - ipred) / piece.g
        cw = np.linalg.solve(piece.chol, piece.e)
        usable = [r for r in subject.observations if r.usable]
        for j, rec in enumerate(usable):
            rows.append(GofRow(
                subject_id=subject.subject_id,
                time=rec.time,
                dv=rec.dv,
                pred=float(pred[j]),
                ipred=float(ipred[j]),
                iwres=float(iwres[j]),
                cwres=float(cw[j]),
            ))
    return rows


def cwres(ds: StudyDataset, ms: ModelSpec, fit_or_params) -> dict[int, np.ndarray]:
    """Conditional weighted residuals per subject: L^-1 (y - f + G eta-hat)
    with V = L L' the FOCE covariance at the supplied estimates."""
    params = _params_of(fit_or_params)
    ebes = fit_or_params.ebes if isinstance(fit_or_params, FitResult) else None
    out: dict[int, np.ndarray] = {}
    for subject, prob, piece in _subject_pieces(ds, ms, params, ebes):
        if prob.y.size == 0:
            out[subject.subject_id] = np.empty(0)
            continue
        out[subject.subject_id] = np.linalg.solve(piece.chol, piece.e)
    return out


def shrinkage(ds: StudyDataset, ms: ModelSpec, fit_or_params) -> ShrinkageReport:
    """Eta shrinkage (1 - SD(eta-hat)/omega, n-1 SD) and IWRES-based epsilon
    shrinkage, recomputed from the supplied estimates."""
    params = _params_of(fit_or_params)
    ebes = fit_or_params.ebes if isinstance(fit_or_params, FitResult) else None
    etas = []
    iwres_all = []
    for subject, prob, piece in _subject_pieces(ds, ms, params, ebes):
        etas.append(piece.eta)
        if prob.y.size:
            iwres_all.append((prob.y - piece.f0) / piece.g)
    omega_diag = _omega_diag(ms, params.omega)
    shr = eta_shrinkage(np.array(etas), omega_diag)
    eps = eps_shrinkage(np.concatenate(iwres_all) if iwres_all else np.empty(0))
    return ShrinkageReport(eta={name: float(shr[i]) for i, name in enumerate(ms.etas)},
                           eps=eps)


GOF_HEADER = ("ID", "TIME", "DV", "PRED", "IPRED", "IWRES", "CWRES")


def gof_table(rows: list[GofRow]) -> str:
    """Plot-ready CSV of the GOF rows."""
    out = [",".join(GOF_HEADER)]
    for r in rows:
        out.append(",".join((
            str(r.subject_id), repr(float(r.time)), repr(float(r.dv)), repr(r.pred),
            repr(r.ipred), repr(r.iwres), repr(r.cwres),
        )))
    return "\n".join(out) + "\n"
