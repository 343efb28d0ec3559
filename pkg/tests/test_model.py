import math

import numpy as np
import pytest

from oracles import grid_cmax, ode_concentration, quad_auc
from poppk.model import (
    CovariateEffect,
    IndividualParams,
    SigmaParams,
    ThetaVector,
    WEIGHT_ON_CL,
    concentration,
    error_sd,
    exposure_metrics,
    individual_params,
)

TABLE_THETA = ThetaVector(cl_f=0.15, v_f=14.0, ka=0.18, wt_exp=0.87, f_large=0.88)


class Cov:
    def __init__(self, wt=15.0, age=43.0, sex=0, volgrp=0, aag=0.65):
        self.wt, self.age, self.sex, self.volgrp, self.aag = wt, age, sex, volgrp, aag


class TestIndividualParams:
    def test_typical_subject_reproduces_population_values(self):
        p = individual_params(TABLE_THETA, Cov(wt=15.0, volgrp=0), np.zeros(3))
        assert p.cl == pytest.approx(0.15)
        assert p.v == pytest.approx(14.0)
        assert p.ka == pytest.approx(0.18)
        assert p.f == 1.0
        assert p.ke == pytest.approx(0.15 / 14.0)

    def test_weight_power_law(self):
        p = individual_params(TABLE_THETA, Cov(wt=12.0), np.zeros(3))
        expected = 0.15 * (12.0 / 15.0) ** 0.87  # 0.123533...
        assert p.cl == pytest.approx(expected, rel=1e-12)
        assert p.cl == pytest.approx(0.1235, abs=5e-5)

    def test_eta_doubles_clearance(self):
        p = individual_params(TABLE_THETA, Cov(), np.array([math.log(2.0), 0.0, 0.0]))
        assert p.cl == pytest.approx(0.30)

    def test_high_volume_group_gets_f_large(self):
        p = individual_params(TABLE_THETA, Cov(volgrp=1), np.zeros(3))
        assert p.f == pytest.approx(0.88)

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ValueError):
            individual_params(TABLE_THETA, Cov(wt=0.0), np.zeros(3))

    def test_monotone_in_weight(self):
        weights = np.linspace(8, 25, 12)
        cls = [individual_params(TABLE_THETA, Cov(wt=w), np.zeros(3)).cl for w in weights]
        assert all(a < b for a, b in zip(cls, cls[1:]))

    def test_extra_covariate_effect_applies(self):
        eff = CovariateEffect("v", "age", "exponential", 43.0)
        theta = TABLE_THETA.with_coefficient(eff, 0.01)
        p = individual_params(theta, Cov(age=53.0), np.zeros(3),
                              effects=(WEIGHT_ON_CL, eff))
        assert p.v == pytest.approx(14.0 * math.exp(0.1))


class TestConcentration:
    def test_against_ode_oracle_typical_subject(self):
        p = IndividualParams(cl=0.15, v=14.0, ka=0.18)
        got = concentration(16.7, 6.0, p)
        assert got == pytest.approx(0.358, abs=5e-4)
        assert got == pytest.approx(ode_concentration(16.7, 6.0, 0.15, 14.0, 0.18), rel=1e-8)

    def test_zero_at_time_zero(self):
        p = IndividualParams(cl=0.15, v=14.0, ka=0.18)
        assert concentration(0.0, 6.0, p) == 0.0

    def test_degenerate_branch_value_and_continuity(self):
        p_eq = IndividualParams(cl=0.01 * 14.0, v=14.0, ka=0.01)
        c_eq = concentration(100.0, 6.0, p_eq)
        assert c_eq == pytest.approx(6 * 0.01 * 100 * math.exp(-1.0) / 14, rel=1e-12)
        assert c_eq == pytest.approx(0.1577, abs=5e-5)
        for sign in (+1, -1):
            p_near = IndividualParams(cl=0.01 * 14.0, v=14.0, ka=0.01 * (1 + sign * 1e-6))
            c_near = concentration(100.0, 6.0, p_near)
            assert c_near == pytest.approx(c_eq, rel=1e-6)

    def test_oracle_agreement_random_parameters(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            cl = rng.uniform(0.02, 0.5)
            v = rng.uniform(3, 30)
            ka = rng.uniform(0.01, 1.0)
            t = rng.uniform(0.5, 120)
            p = IndividualParams(cl=cl, v=v, ka=ka)
            assert concentration(t, 6.0, p) == pytest.approx(
                ode_concentration(t, 6.0, cl, v, ka), rel=1e-7)

    def test_nonnegative_single_peak_shape(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            p = IndividualParams(cl=rng.uniform(0.05, 0.4), v=rng.uniform(5, 25),
                                 ka=rng.uniform(0.02, 0.8))
            m = exposure_metrics(p, 6.0)
            t = np.linspace(0, 60 * math.log(2) / min(p.ke, p.ka), 4000)
            c = concentration(t, 6.0, p)
            assert np.all(c >= 0)
            # the closed-form peak dominates the whole grid
            assert np.max(c) <= m.cmax * (1 + 1e-9)
            after = c[t > m.tmax]
            assert np.all(np.diff(after) <= 1e-12)
            before = c[(t > 0) & (t < m.tmax)]
            assert np.all(np.diff(before) >= -1e-12)


class TestErrorSd:
    def test_proportional(self):
        s = SigmaParams(model="proportional", prop=0.14)
        assert error_sd(0.3, s) == pytest.approx(0.042)

    def test_floor_at_zero_prediction(self):
        s = SigmaParams(model="proportional", prop=0.14)
        assert error_sd(0.0, s) == pytest.approx(1e-10)

    def test_combined_pythagorean(self):
        s = SigmaParams(model="combined", prop=0.1, add=0.03)
        assert error_sd(0.4, s) == pytest.approx(0.05)

    def test_additive_constant(self):
        s = SigmaParams(model="additive", add=0.02)
        assert np.allclose(error_sd(np.array([0.0, 0.3, 2.0]), s), 0.02)

    def test_inactive_components_must_be_zero(self):
        with pytest.raises(ValueError):
            SigmaParams(model="proportional", prop=0.1, add=0.01)


class TestExposures:
    def test_typical_subject_auc(self):
        p = IndividualParams(cl=0.15, v=14.0, ka=0.18)
        m = exposure_metrics(p, 6.0)
        assert m.auc == pytest.approx(40.0)
        # study-reported median AUC was 41
        assert abs(m.auc - 41) / 41 < 0.05

    def test_tmax_against_numeric_argmax(self):
        p = IndividualParams(cl=0.15, v=14.0, ka=0.18)
        m = exposure_metrics(p, 6.0)
        ke = 0.15 / 14.0
        assert m.tmax == pytest.approx(math.log(0.18 / ke) / (0.18 - ke), rel=1e-12)
        assert m.tmax == pytest.approx(16.7, abs=0.05)
        cmax_ref, tmax_ref = grid_cmax(6.0, 0.15, 14.0, 0.18)
        assert m.tmax == pytest.approx(tmax_ref, rel=1e-6)
        assert m.cmax == pytest.approx(cmax_ref, rel=1e-6)

    def test_unbound_cmax_scaling(self):
        p = IndividualParams(cl=0.15, v=14.0, ka=0.18)
        m = exposure_metrics(p, 6.0, fu=0.01)
        assert m.cu_max == pytest.approx(m.cmax * 10.0)
        # arithmetic convention from the study table: 0.315 mg/L -> 3.15 ug/L
        scaled = 0.315 * 0.01 * 1000
        assert scaled == pytest.approx(3.15)

    def test_auc_matches_quadrature(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            cl = rng.uniform(0.05, 0.4)
            v = rng.uniform(5, 25)
            ka = rng.uniform(0.02, 0.8)
            p = IndividualParams(cl=cl, v=v, ka=ka)
            m = exposure_metrics(p, 6.0)
            assert m.auc == pytest.approx(quad_auc(6.0, cl, v, ka), rel=1e-3)

    def test_cmax_matches_grid_near_degenerate(self):
        for rel in (1e-3, 1e-6):
            ke = 0.01
            ka = ke * (1 + rel)
            p = IndividualParams(cl=ke * 14.0, v=14.0, ka=ka)
            m = exposure_metrics(p, 6.0)
            t = np.linspace(0.01, 1500, 300001)
            grid_max = float(np.max(concentration(t, 6.0, p)))
            assert m.cmax == pytest.approx(grid_max, rel=1e-3)

    def test_dose_scaling_invariance(self):
        p = IndividualParams(cl=0.2, v=12.0, ka=0.3)
        m1 = exposure_metrics(p, 5.0)
        m2 = exposure_metrics(p, 10.0)
        assert m2.tmax == pytest.approx(m1.tmax)
        assert m2.auc == pytest.approx(2 * m1.auc)
        assert m2.cmax == pytest.approx(2 * m1.cmax)

    def test_degenerate_tmax_limit(self):
        ke = 0.02
        p = IndividualParams(cl=ke * 10.0, v=10.0, ka=ke)
        m = exposure_metrics(p, 6.0)
        assert m.tmax == pytest.approx(1.0 / ke)

    def test_rejects_nonpositive_dose(self):
        p = IndividualParams(cl=0.15, v=14.0, ka=0.18)
        with pytest.raises(ValueError):
            exposure_metrics(p, 0.0)
