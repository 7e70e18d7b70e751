"""Prony-series evaluation, fitting, and time-step truncation."""

from fractions import Fraction

import numpy as np
import pytest

from conftest import ELASTOMER_G, ELASTOMER_G_INF, ELASTOMER_TAU
from sorotopt.errors import ConfigurationError, FitError
from sorotopt.prony import (
    MasterCurve,
    PronySeries,
    eval_moduli,
    fit_prony,
    fit_residual,
    truncate_for_dt,
)


class TestPronySeries:
    def test_ordering_enforced(self):
        with pytest.raises(ConfigurationError):
            PronySeries(0.1, [0.2, 0.3], [1e-3, 1e-2])  # increasing taus

    def test_negative_modulus_rejected(self):
        with pytest.raises(ConfigurationError):
            PronySeries(-0.1)

    def test_total_relative_modulus(self, elastomer_series):
        total = elastomer_series.total_relative_modulus
        assert total == pytest.approx(ELASTOMER_G_INF + sum(ELASTOMER_G), rel=1e-15)


class TestEvalModuli:
    def test_zero_frequency_limit(self, elastomer_series):
        storage, loss = eval_moduli(elastomer_series, 0.0)
        assert storage == ELASTOMER_G_INF
        assert loss == 0.0

    def test_single_element_debye_peak(self):
        series = PronySeries(0.2, [0.6], [0.01])
        storage, loss = eval_moduli(series, 1.0 / 0.01)
        assert storage == pytest.approx(0.2 + 0.3, rel=1e-14)
        assert loss == pytest.approx(0.3, rel=1e-14)

    def test_full_series_against_exact_rational_arithmetic(self, elastomer_series):
        # at omega = 1 rad/s every term is rational in the tabulated values
        omega = 1
        storage_exact = Fraction(str(ELASTOMER_G_INF))
        loss_exact = Fraction(0)
        for g, tau in zip(ELASTOMER_G, ELASTOMER_TAU):
            gf, tf = Fraction(str(g)), Fraction(str(tau))
            storage_exact += gf * tf**2 / (1 + tf**2)
            loss_exact += gf * tf / (1 + tf**2)
        storage, loss = eval_moduli(elastomer_series, float(omega))
        assert storage == pytest.approx(float(storage_exact), rel=1e-12)
        assert loss == pytest.approx(float(loss_exact), rel=1e-12)

    def test_storage_nondecreasing_and_loss_nonnegative(self, elastomer_series):
        omega = np.logspace(-4, 9, 400)
        storage, loss = eval_moduli(elastomer_series, omega)
        assert np.all(np.diff(storage) >= -1e-15)
        assert np.all(loss >= 0)

    def test_high_frequency_plateau(self, elastomer_series):
        storage_hi, _ = eval_moduli(elastomer_series, 1e12)
        storage_lo, _ = eval_moduli(elastomer_series, 0.0)
        assert storage_hi - storage_lo == pytest.approx(
            sum(ELASTOMER_G), rel=1e-10)


def synthetic_curve(series: PronySeries, omega) -> MasterCurve:
    storage, loss = eval_moduli(series, omega)
    return MasterCurve(omega, storage, loss)


class TestFitProny:
    def test_three_element_recovery(self):
        generator = PronySeries(0.05, [0.3, 0.5, 0.15], [1e-1, 1e-3, 1e-5])
        omega = np.logspace(-1, 6, 50)
        series, residual = fit_prony(synthetic_curve(generator, omega), 3,
                                     (1e-5, 1e-1))
        np.testing.assert_allclose(series.moduli, generator.moduli, rtol=0.01)
        assert series.g_inf == pytest.approx(generator.g_inf, rel=0.01)
        assert residual < 1e-10

    def test_single_element_exact(self):
        generator = PronySeries(0.1, [0.9], [1e-2])
        omega = np.logspace(0, 4, 20)
        series, residual = fit_prony(synthetic_curve(generator, omega), 1,
                                     (1e-2, 1e-2))
        np.testing.assert_allclose(series.moduli, generator.moduli, rtol=1e-8)
        assert series.g_inf == pytest.approx(0.1, rel=1e-8)

    def test_elastomer_series_recovery(self, elastomer_series):
        # synthetic master curve from the five-element series, fit with five
        # terms over the tabulated relaxation-time span
        omega = np.logspace(-1.5, 6.9, 60)
        series, _ = fit_prony(synthetic_curve(elastomer_series, omega), 5,
                              (ELASTOMER_TAU[-1], ELASTOMER_TAU[0]))
        # the tabulated taus are rounded to 3 significant figures, so the
        # exactly log-equal grid lands within a few tenths of a percent
        np.testing.assert_allclose(series.taus, ELASTOMER_TAU, rtol=5e-3)
        np.testing.assert_allclose(series.moduli, elastomer_series.moduli,
                                   rtol=0.05)
        assert series.g_inf == pytest.approx(ELASTOMER_G_INF, rel=0.05)

    def test_frequency_cap_applied(self, elastomer_series):
        omega = np.logspace(-1, 9, 40)  # includes samples above 1e7 rad/s
        series, _ = fit_prony(synthetic_curve(elastomer_series, omega), 5,
                              (ELASTOMER_TAU[-1], ELASTOMER_TAU[0]))
        assert np.all(series.moduli >= 0)

    def test_rank_deficiency_rejected(self):
        generator = PronySeries(0.1, [0.9], [1e-2])
        curve = synthetic_curve(generator, np.array([1.0]))
        with pytest.raises(FitError):
            fit_prony(curve, 5, (1e-5, 1e-1))

    def test_fit_residual_not_worse_than_generator(self):
        rng = np.random.default_rng(42)
        generator = PronySeries(0.05, [0.4, 0.5], [1e-1, 1e-4])
        omega = np.logspace(-1, 6, 40)
        storage, loss = eval_moduli(generator, omega)
        noisy = MasterCurve(omega, storage * (1 + 0.02 * rng.standard_normal(40)),
                            np.abs(loss * (1 + 0.02 * rng.standard_normal(40))))
        fitted, residual = fit_prony(noisy, 2, (1e-4, 1e-1))
        assert residual <= fit_residual(generator, noisy) + 1e-12


class TestTruncation:
    def test_elastomer_truncation_at_simulation_dt(self, elastomer_series):
        truncated = truncate_for_dt(elastomer_series, dt=1e-5)
        assert truncated.n_elements == 3
        np.testing.assert_array_equal(truncated.taus, ELASTOMER_TAU[:3])
        np.testing.assert_array_equal(truncated.moduli, ELASTOMER_G[:3])
        assert truncated.g_inf == ELASTOMER_G_INF

    def test_slow_elements_survive(self):
        series = PronySeries(0.1, [0.5, 0.4], [1.0, 0.1])
        out = truncate_for_dt(series, dt=1e-5)
        assert out.n_elements == 2

    def test_vanishing_dt_keeps_all(self, elastomer_series):
        out = truncate_for_dt(elastomer_series, dt=1e-12)
        assert out.n_elements == 5

    def test_never_increases_total_modulus(self, elastomer_series):
        out = truncate_for_dt(elastomer_series, dt=1e-4)
        assert out.moduli.sum() <= elastomer_series.moduli.sum()


class TestMasterCurve:
    def test_rejects_unsorted_frequencies(self):
        with pytest.raises(ConfigurationError):
            MasterCurve(np.array([1.0, 0.5]), np.array([1.0, 1.0]),
                        np.array([0.1, 0.1]))

    def test_rejects_nonpositive_storage(self):
        with pytest.raises(ConfigurationError):
            MasterCurve(np.array([0.5, 1.0]), np.array([1.0, 0.0]),
                        np.array([0.1, 0.1]))
