"""Population simulation: de novo study designs and design-preserving replicates.

Randomness is fully determined by (seed, design, parameters).  Every
subject consumes its own counter-derived generator stream,
``default_rng([seed, subject_index])`` (replicates prepend the replicate
index), so simulation is reproducible under any degree of parallelism.
Per subject the draw order is: covariate resampling index (resample mode
only), then the eta vector, then one residual deviate per observation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import DEFAULT_LLOQ, EventRecord, StudyDataset, Subject
from .estimate import ModelSpec, ParameterSet, subject_individual_params
from .model import concentration_profile, error_sd

__all__ = [
    "StudyDesign",
    "DEFAULT_TIMES",
    "simulate_dataset",
    "simulate_replicate",
    "apply_lloq",
]

DEFAULT_TIMES = (5.0, 15.0, 20.0, 25.0, 30.0, 45.0, 60.0, 75.0)


@dataclass(frozen=True)
class StudyDesign:
    """Sampling schedule, dosing rule and covariate source for simulation.

    ``covariates`` is either a StudyDataset to resample subjects from (with
    replacement) or an explicit list of per-subject dicts with keys
    ``wt``, ``age``, ``sex`` and optional ``aag``, ``volgrp``.  When an
    explicit entry carries no ``volgrp``, groups are allocated
    deterministically: the first ``round(high_volume_fraction * n)``
    subjects are high-volume.
    """

    n_subjects: int
    covariates: object                      # StudyDataset | list[dict]
    times: tuple[float, ...] = DEFAULT_TIMES
    dose_mg_per_kg: float = 0.4
    high_volume_fraction: float = 0.5
    lloq: float = DEFAULT_LLOQ

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise ValueError("n_subjects must be positive")
        if self.dose_mg_per_kg <= 0:
            raise ValueError("dose rule must be positive")
        if any(t2 <= t1 for t1, t2 in zip(self.times, self.times[1:])):
            raise ValueError("sampling times must be strictly increasing")
        if not 0.0 <= self.high_volume_fraction <= 1.0:
            raise ValueError("high_volume_fraction must be in [0, 1]")


@dataclass(frozen=True)
class _Covs:
    wt: float
    age: float
    sex: int
    volgrp: int
    aag: float | None


def _draw_covariates(design: StudyDesign, index: int, rng: np.random.Generator) -> _Covs:
    n_high = int(round(design.high_volume_fraction * design.n_subjects))
    default_volgrp = 1 if index < n_high else 0
    src = design.covariates
    if isinstance(src, StudyDataset):
        pick = src.subjects[int(rng.integers(0, len(src.subjects)))]
        return _Covs(wt=pick.wt, age=pick.age, sex=pick.sex, volgrp=default_volgrp,
                     aag=pick.aag)
    entry = src[index % len(src)]
    volgrp = int(entry.get("volgrp", default_volgrp))
    return _Covs(wt=float(entry["wt"]), age=float(entry["age"]), sex=int(entry["sex"]),
                 volgrp=volgrp, aag=entry.get("aag"))


def _simulate_subject(subject_id: int, covs: _Covs, dose: float, times,
                      ms: ModelSpec, params: ParameterSet,
                      rng: np.random.Generator) -> Subject:
    omega_diag = np.array([params.omega.variance(name) for name in ms.etas])
    eta = rng.standard_normal(len(ms.etas)) * np.sqrt(omega_diag)
    p = subject_individual_params(
        _CovSubject(covs), ms, params, eta
    )
    times = np.asarray(times, dtype=float)
    conc = concentration_profile(times, dose, p.cl, p.v, p.ka, p.f)
    noise = rng.standard_normal(times.size)
    dv = conc + error_sd(conc, params.sigma) * noise

    common = dict(subject_id=subject_id, wt=covs.wt, age=covs.age, sex=covs.sex,
                  volgrp=covs.volgrp, aag=covs.aag)
    records = [EventRecord(time=0.0, evid=1, amt=dose, dv=None, mdv=1, mdv_input=1, **common)]
    for t, value in zip(times, dv):
        records.append(EventRecord(time=float(t), evid=0, amt=None, dv=float(value),
                                   mdv=0, mdv_input=0, **common))
    return Subject(subject_id=subject_id, records=tuple(records))


class _CovSubject:
    """Adapter giving _Covs the attribute surface of a dataset Subject."""

    def __init__(self, covs: _Covs):
        self.wt = covs.wt
        self.age = covs.age
        self.sex = covs.sex
        self.volgrp = covs.volgrp
        self.aag = covs.aag

    def covariate(self, name: str):
        return getattr(self, name)


def simulate_dataset(design: StudyDesign, ms: ModelSpec, params: ParameterSet,
                     seed: int) -> StudyDataset:
    """Simulate a complete study: covariates, etas, residual noise, censoring.

    Negative concentrations possible under additive error are kept (then
    typically censored) so residual distributions stay unbiased.
    """
    subjects = []
    for i in range(design.n_subjects):
        rng = np.random.default_rng([seed, i])
        covs = _draw_covariates(design, i, rng)
        dose = design.dose_mg_per_kg * covs.wt
        subjects.append(_simulate_subject(i + 1, covs, dose, design.times, ms, params, rng))
    ds = StudyDataset(subjects=tuple(subjects), lloq=design.lloq)
    return apply_lloq(ds, design.lloq)


def simulate_replicate(ds: StudyDataset, ms: ModelSpec, params: ParameterSet,
                       seed: int, replicate: int = 0) -> StudyDataset:
    """Re-simulate ``ds`` under the model: same subjects, covariates, doses and
    observation times, fresh etas and residuals.  Stream per subject:
    ``default_rng([seed, replicate, position])``."""
    subjects = []
    for pos, subject in enumerate(ds.subjects):
        rng = np.random.default_rng([seed, replicate, pos])
        covs = _Covs(wt=subject.wt, age=subject.age, sex=subject.sex,
                     volgrp=subject.volgrp, aag=subject.aag)
        dose_rec = subject.doses[0]
        times = [r.time - dose_rec.time for r in subject.observations]
        sim = _simulate_subject(subject.subject_id, covs, dose_rec.amt, times, ms,
                                params, rng)
        # restore original clock times (dose may not sit at t=0)
        if dose_rec.time != 0.0:
            recs = [replace(r, time=r.time + dose_rec.time) for r in sim.records]
            sim = Subject(subject_id=sim.subject_id, records=tuple(recs))
        subjects.append(sim)
    return apply_lloq(StudyDataset(subjects=tuple(subjects), lloq=ds.lloq), ds.lloq)


def apply_lloq(ds: StudyDataset, lloq: float) -> StudyDataset:
    """Censor observations strictly below ``lloq`` (mdv=1); raw dv retained.

    Censoring is recomputed from ``mdv_input`` and the new limit, so the
    operation is idempotent and monotone in ``lloq``.
    """
    if lloq < 0:
        raise ValueError("lloq must be >= 0")
    subjects = []
    for subject in ds.subjects:
        records = []
        for r in subject.records:
            if r.evid == 0:
                mdv = 1 if (r.mdv_input == 1 or (r.dv is not None and r.dv < lloq)) else 0
                records.append(replace(r, mdv=mdv))
            else:
                records.append(r)
        subjects.append(Subject(subject_id=subject.subject_id, records=tuple(records)))
    return StudyDataset(subjects=tuple(subjects), lloq=lloq)
