import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import STUDY_OMEGA, STUDY_SIGMA, STUDY_THETA, make_study_dataset
from oracles import ode_concentration
from poppk.dataset import StudyDataset, Subject
from poppk.diagnostics import cwres, gof_table, predictions, shrinkage
from poppk.estimate import (
    ModelSpec,
    ParameterSet,
    SubjectProblem,
    _ebe_core,
    _linearize,
    eps_shrinkage,
    eta_shrinkage,
    fit,
    FitSettings,
)
from poppk.model import OmegaMatrix, SigmaParams, ThetaVector


class TestPredictions:
    def test_pred_equals_ipred_when_ebe_zero(self, study_model, study_params):
        ds = make_study_dataset(seed=30, n_subjects=2)
        censored = StudyDataset(
            subjects=tuple(
                Subject(subject_id=s.subject_id,
                        records=tuple(replace(r, mdv=1, mdv_input=1) if r.evid == 0 else r
                                      for r in s.records))
                for s in ds.subjects
            ),
            lloq=ds.lloq,
        )
        rows = predictions(censored, study_model, study_params)
        assert rows == []  # no usable rows -> no GOF rows

    def test_pred_ipred_iwres_noise_free(self, study_model):
        quiet = ParameterSet(theta=STUDY_THETA, omega=OmegaMatrix(cl=1e-8, v=1e-8, ka=1e-8),
                             sigma=SigmaParams(model="proportional", prop=1e-4))
        ds = make_study_dataset(seed=31, n_subjects=3, params=quiet)
        rows = predictions(ds, study_model, quiet)
        assert rows
        for r in rows:
            assert r.ipred == pytest.approx(r.pred, rel=1e-3)
            assert abs(r.iwres) < 0.05

    def test_pred_matches_structural_oracle(self, study_model, study_params):
        ds = make_study_dataset(seed=32, n_subjects=1)
        subject = ds.subjects[0]
        rows = predictions(ds, study_model, study_params)
        wt_mult = (subject.wt / 15.0) ** 0.87
        cl = 0.15 * wt_mult
        f = 1.0 if subject.volgrp == 0 else 0.88
        for row in rows:
            expected = f * ode_concentration(row.time, subject.dose_amount, cl, 14.0, 0.18)
            assert row.pred == pytest.approx(expected, rel=1e-6)

    def test_typical_prediction_near_study_peak(self):
        # a 15-kg low-volume subject at the population parameters, t ~ 17 min
        header = "ID,TIME,EVID,AMT,DV,MDV,WT,AGE,SEX,VOLGRP,AAG\n"
        rows = ["1,0,1,6,.,.,15,43,0,0,.", "1,17,0,.,0.3,0,15,43,0,0,."]
        from poppk.dataset import parse_dataset
        ds = parse_dataset(header + "\n".join(rows) + "\n")
        params = ParameterSet(theta=STUDY_THETA, omega=STUDY_OMEGA, sigma=STUDY_SIGMA)
        row = predictions(ds, ModelSpec(), params)[0]
        assert row.pred == pytest.approx(0.358, abs=0.005)

    def test_gof_rows_only_for_usable_records(self, study_model, study_params):
        ds = make_study_dataset(seed=33, n_subjects=5, lloq=0.2)  # aggressive censoring
        rows = predictions(ds, study_model, study_params)
        assert len(rows) == ds.n_usable_observations
        text = gof_table(rows)
        assert text.splitlines()[0] == "ID,TIME,DV,PRED,IPRED,IWRES,CWRES"


class TestCwres:
    def test_linear_gaussian_scalar_case(self):
        prob = SubjectProblem(
            subject_id=1,
            y=np.array([2.0]),
            predict=lambda etas: np.atleast_2d(etas)[:, [0]],
            sd=lambda pred: np.ones_like(pred),
            n_eta=1,
        )
        om = np.array([1.0])
        eta, _ = _ebe_core(prob, om)
        piece = _linearize(prob, om, eta)
        value = float(np.linalg.solve(piece.chol, piece.e)[0])
        assert value == pytest.approx(2.0 / math.sqrt(2.0), abs=1e-9)

    def test_distribution_under_true_model(self, study_model, study_params):
        ds = make_study_dataset(seed=34, n_subjects=30, lloq=0.0)
        per_subject = cwres(ds, study_model, study_params)
        values = np.concatenate([v for v in per_subject.values()])
        assert values.size == 240
        assert abs(values.mean()) < 0.15
        assert 0.8 < values.std(ddof=1) < 1.2

    def test_matches_predictions_column(self, study_model, study_params):
        ds = make_study_dataset(seed=35, n_subjects=4)
        rows = predictions(ds, study_model, study_params)
        per_subject = cwres(ds, study_model, study_params)
        flat = {}
        for sid, arr in per_subject.items():
            usable = [r for r in ds.subject(sid).observations if r.usable]
            for rec, v in zip(usable, arr):
                flat[(sid, rec.time)] = v
        for row in rows:
            assert row.cwres == pytest.approx(flat[(row.subject_id, row.time)], rel=1e-12)


class TestShrinkage:
    def test_all_zero_ebes_give_exactly_100_percent(self):
        shr = eta_shrinkage(np.zeros((12, 3)), np.array([0.1681, 0.2209, 0.6561]))
        assert np.all(shr == 1.0)

    def test_reported_convention_arithmetic(self):
        # SD(eta_cl) = 0.361 with omega_cl = 0.41 -> 12% shrinkage
        assert 1 - 0.361 / 0.41 == pytest.approx(0.12, abs=5e-3)

    def test_rich_noiseless_design_low_shrinkage(self):
        times = tuple(float(t) for t in np.linspace(2, 150, 24))
        from poppk.simulate import StudyDesign, simulate_dataset
        rng = np.random.default_rng(36)
        covs = [{"wt": float(15 * np.exp(rng.normal(0, 0.3))),
                 "age": float(rng.uniform(14, 71)), "sex": 0} for _ in range(30)]
        params = ParameterSet(theta=STUDY_THETA, omega=STUDY_OMEGA,
                              sigma=SigmaParams(model="proportional", prop=0.02))
        design = StudyDesign(n_subjects=30, covariates=covs, times=times, lloq=0.0)
        ds = simulate_dataset(design, ModelSpec(), params, seed=37)
        report = shrinkage(ds, ModelSpec(), params)
        assert all(v < 0.05 for v in report.eta.values())

    def test_scale_invariance(self, study_model):
        ds = make_study_dataset(seed=38, n_subjects=10)
        params = ParameterSet(theta=STUDY_THETA, omega=STUDY_OMEGA, sigma=STUDY_SIGMA)
        base = shrinkage(ds, study_model, params)

        factor = 1000.0
        subs = []
        for s in ds.subjects:
            recs = []
            for r in s.records:
                if r.evid == 1:
                    recs.append(replace(r, amt=r.amt * factor))
                else:
                    recs.append(replace(r, dv=None if r.dv is None else r.dv * factor))
            subs.append(Subject(subject_id=s.subject_id, records=tuple(recs)))
        scaled_ds = StudyDataset(subjects=tuple(subs), lloq=ds.lloq * factor)
        scaled = shrinkage(scaled_ds, study_model, params)
        for k in base.eta:
            assert scaled.eta[k] == pytest.approx(base.eta[k], abs=1e-6)
        assert scaled.eps == pytest.approx(base.eps, abs=1e-6)

    def test_eps_shrinkage_formula(self):
        rng = np.random.default_rng(39)
        iwres = rng.normal(0, 0.8, size=500)
        assert eps_shrinkage(iwres) == pytest.approx(1 - np.std(iwres, ddof=1), rel=1e-12)

    def test_fit_reports_shrinkage(self, study_model, default_init):
        ds = make_study_dataset(seed=40, n_subjects=25)
        res = fit(ds, study_model, default_init, FitSettings(compute_se=False))
        assert res.converged
        pct = res.shrinkage_percent()
        for key in ("eta_cl", "eta_v", "eta_ka", "eps"):
            assert 0.0 <= pct[key] <= 100.0
