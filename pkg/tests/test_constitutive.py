"""Constitutive-model oracles: energy consistency, Maxwell recursion, fluid."""

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import random_deformation
from sorotopt import constitutive as cst
from sorotopt.errors import ConfigurationError, InversionError
from sorotopt.prony import PronySeries, eval_moduli

E0, NU, RHO = 0.44e6, 0.4, 1.07e3
LAM, MU = cst.lame_parameters(E0, NU)
KBULK = (3 * LAM + 2 * MU) / 3


def elastic_material(**kw) -> cst.SolidMaterial:
    return cst.SolidMaterial(density=RHO, lam=LAM, mu=MU, **kw)


# independent re-implementation of the stored energy for the FD oracle
def stored_energy(f, lam=LAM, mu=MU):
    j = np.linalg.det(f)
    k = (3 * lam + 2 * mu) / 3
    psi_h = 0.25 * k * ((j - 1.0) ** 2 + np.log(j) ** 2)
    f_bar = j ** (-1.0 / 3.0) * f
    psi_d = 0.5 * mu * (np.trace(f_bar.T @ f_bar) - 3.0)
    return psi_h + psi_d


def cauchy_from_energy_fd(f, h=1e-6):
    """sigma = (1/J) (dPsi/dF) F^T by central differences."""
    p = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            fp, fm = f.copy(), f.copy()
            fp[i, j] += h
            fm[i, j] -= h
            p[i, j] = (stored_energy(fp) - stored_energy(fm)) / (2 * h)
    return p @ f.T / np.linalg.det(f)


class TestInterpolation:
    def test_full_density_recovers_base(self):
        mat = elastic_material()
        rho, lam, mu = cst.interpolate_properties(1.0, mat)
        assert rho == RHO and lam == LAM and mu == MU

    def test_void_floor(self):
        mat = elastic_material(void_epsilon=1e-6)
        rho, _, _ = cst.interpolate_properties(0.0, mat)
        assert rho == pytest.approx(1e-6 * RHO)

    def test_cubic_midpoint(self):
        mat = elastic_material(void_epsilon=1e-12)
        rho, _, _ = cst.interpolate_properties(0.5, mat)
        assert rho == pytest.approx(0.125 * RHO, rel=1e-9)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            cst.interpolate_properties(1.5, elastic_material())

    def test_wave_speed_independent_of_density(self):
        # all three properties share the cubic factor, so c = sqrt(K_eff/rho)
        # must not depend on the design density
        mat = elastic_material()
        for gamma in (0.2, 0.5, 1.0):
            rho, lam, mu = cst.interpolate_properties(gamma, mat)
            c = np.sqrt((lam + 2 * mu) / rho)
            assert c == pytest.approx(np.sqrt((LAM + 2 * MU) / RHO), rel=1e-12)


class TestSolidStress:
    def test_reference_state_is_stress_free(self):
        sigma = cst.solid_stress(np.eye(3), np.zeros((0, 3, 3)), elastic_material())
        np.testing.assert_array_equal(sigma, np.zeros((3, 3)))

    def test_pure_dilation_matches_energy_derivative(self):
        j = 1.1
        f = j ** (1 / 3) * np.eye(3)
        sigma = cst.solid_stress(f, np.zeros((0, 3, 3)), elastic_material())
        # oracle: dPsiH/dJ by central differences of the test-local energy
        h = 1e-7
        fd = (stored_energy((j + h) ** (1 / 3) * np.eye(3))
              - stored_energy((j - h) ** (1 / 3) * np.eye(3))) / (2 * h)
        assert sigma[0, 0] == pytest.approx(fd, rel=1e-6)
        # deviatoric part vanishes; magnitude matches (K/2)((J-1)+lnJ/J)
        np.testing.assert_allclose(sigma, sigma[0, 0] * np.eye(3), atol=1e-9)
        assert sigma[0, 0] == pytest.approx(
            0.5 * KBULK * ((j - 1) + np.log(j) / j), rel=1e-12)
        assert sigma[0, 0] == pytest.approx(68.43e3, rel=1e-3)

    def test_small_shear_matches_energy_derivative(self):
        f = np.eye(3)
        f[0, 1] = 0.02
        sigma = cst.solid_stress(f, np.zeros((0, 3, 3)), elastic_material())
        np.testing.assert_allclose(sigma, cauchy_from_energy_fd(f),
                                   rtol=1e-6, atol=1e-6 * MU)

    def test_energy_consistency_on_random_deformations(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            f = random_deformation(rng)
            sigma = cst.solid_stress(f, np.zeros((0, 3, 3)), elastic_material())
            oracle = cauchy_from_energy_fd(f)
            scale = max(np.abs(oracle).max(), 1e-3 * MU)
            assert np.abs(sigma - oracle).max() < 1e-5 * scale

    def test_objectivity_under_rotation(self):
        rng = np.random.default_rng(3)
        series = PronySeries(0.8, [0.5], [0.1])
        mat = elastic_material().with_prony(series)
        for _ in range(20):
            f = random_deformation(rng)
            q = rng.standard_normal((1, 3, 3))
            q = q - np.trace(q, axis1=-2, axis2=-1)[:, None, None] * np.eye(3) / 3
            theta, axis = rng.uniform(0, np.pi), rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            kmat = np.array([[0, -axis[2], axis[1]],
                             [axis[2], 0, -axis[0]],
                             [-axis[1], axis[0], 0]])
            rot = np.eye(3) + np.sin(theta) * kmat + (1 - np.cos(theta)) * kmat @ kmat
            sigma = cst.solid_stress(f, q, mat)
            sigma_rot = cst.solid_stress(rot @ f, q, mat)
            np.testing.assert_allclose(sigma_rot, rot @ sigma @ rot.T,
                                       rtol=1e-9, atol=1e-9 * np.abs(sigma).max())

    def test_deviator_trace_free(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((50, 3, 3))
        dev = np.asarray(cst.deviator(a))
        tr = np.trace(dev, axis1=-2, axis2=-1)
        assert np.all(np.abs(tr) < 1e-12 * np.linalg.norm(dev, axis=(1, 2)) + 1e-15)

    def test_inverted_deformation_rejected(self):
        with pytest.raises(InversionError):
            cst.solid_stress(-np.eye(3), np.zeros((0, 3, 3)), elastic_material())

    def test_zero_branch_moduli_reduce_to_equilibrium(self):
        # with all g_i = 0 the history contributes nothing
        mat = elastic_material().with_prony(PronySeries(0.6, [0.0, 0.0], [0.1, 0.01]))
        f = random_deformation(np.random.default_rng(5))
        q = np.random.default_rng(6).standard_normal((2, 3, 3))
        q = q - np.trace(q, axis1=-2, axis2=-1)[:, None, None] * np.eye(3) / 3
        sigma = cst.solid_stress(f, q, mat)
        sigma_eq = cst.solid_stress(f, np.zeros((2, 3, 3)), mat)
        np.testing.assert_allclose(sigma, sigma_eq, atol=1e-12)


class TestMaxwellAdvance:
    def test_step_input_initial_response(self):
        s = np.array([[0.0, 1.0, 0], [1.0, 0, 0], [0, 0, 0.0]])
        tau, g = 0.05, 0.7
        h, sigma = cst.maxwell_advance(np.zeros((3, 3)), np.zeros((3, 3)), s,
                                       dt=1e-8 * tau, element=(g, tau))
        np.testing.assert_allclose(sigma, g * s, rtol=1e-6)

    def test_step_input_relaxes_exponentially(self):
        s = np.array([[0.0, 1.0, 0], [1.0, 0, 0], [0, 0, 0.0]])
        tau, g = 0.05, 0.7
        h, _ = cst.maxwell_advance(np.zeros((3, 3)), np.zeros((3, 3)), s,
                                   dt=1e-8 * tau, element=(g, tau))
        # zero-rate decay steps are exact for any dt
        for _ in range(10):
            h, sigma = cst.maxwell_advance(h, s, s, dt=tau / 10, element=(g, tau))
        np.testing.assert_allclose(sigma, g * np.exp(-1.0) * s, rtol=1e-6)

    def test_recursion_matches_quadrature_oracle(self):
        # smooth input, 1000 steps at dt = tau/10; the oracle is the exact
        # hereditary integral int_0^t exp(-(t-t')/tau) qdot dt' for the
        # sinusoid (closed form, spot-validated by adaptive quadrature)
        tau, g = 0.02, 1.0
        dt = tau / 10
        omega = 0.3 / tau
        n_steps = 1000

        def exact_integral(t):
            rate = 1.0 / tau + 1j * omega
            return np.real(omega * np.exp(-t / tau)
                           * (np.exp(rate * t) - 1.0) / rate)

        for t_probe in (3 * tau, 40 * tau):
            spot, _ = quad(
                lambda tp: np.exp(-(t_probe - tp) / tau) * omega * np.cos(omega * tp),
                0.0, t_probe, limit=500)
            assert exact_integral(t_probe) == pytest.approx(spot, rel=1e-9)

        h = np.zeros((3, 3))
        basis = np.array([[0, 1.0, 0], [1.0, 0, 0], [0, 0, 0]])
        recursion = np.zeros(n_steps)
        for k in range(n_steps):
            h, sigma = cst.maxwell_advance(
                h, np.sin(omega * k * dt) * basis,
                np.sin(omega * (k + 1) * dt) * basis, dt=dt, element=(g, tau))
            recursion[k] = sigma[0, 1]
        times = dt * np.arange(1, n_steps + 1)
        oracle = exact_integral(times)
        err = np.linalg.norm(recursion - oracle) / np.linalg.norm(oracle)
        assert err < 1e-3

    def test_cyclic_loading_reproduces_frequency_moduli(self):
        # drive a small simple shear and compare steady-state amplitudes with
        # the storage/loss moduli of the series
        series = PronySeries(0.3, [0.5, 0.4], [0.1, 0.01])
        mat = elastic_material().with_prony(series)
        omega = 30.0
        period = 2 * np.pi / omega
        n_cycles, steps_per_cycle = 10, 400
        dt = period / steps_per_cycle
        amp = 1e-4
        n_steps = n_cycles * steps_per_cycle

        # batched kinematics for all step endpoints 0..n_steps
        times_all = dt * np.arange(n_steps + 1)
        f_all = np.tile(np.eye(3), (n_steps + 1, 1, 1))
        f_all[:, 0, 1] = amp * np.sin(omega * times_all)
        _, fb_all, _, dev_all = (np.asarray(a) for a in
                                 cst.elastic_stress_parts(f_all, LAM, MU))
        q_all = np.asarray(cst.maxwell_pullback(fb_all, dev_all))

        hist = np.zeros((2, 3, 3))
        tail = slice((n_cycles - 1) * steps_per_cycle, n_steps)
        stresses = []
        for k in range(n_steps):
            for i, (g, tau) in enumerate(zip(series.moduli, series.taus)):
                hist[i], _ = cst.maxwell_advance(hist[i], q_all[k], q_all[k + 1],
                                                 dt, (g, tau))
            if k >= tail.start:
                stresses.append(cst.solid_stress(f_all[k + 1], hist, mat)[0, 1])
        times = times_all[tail.start + 1: n_steps + 1]
        stresses = np.asarray(stresses)
        # project the last cycle onto sin/cos
        sin_part = 2 * np.mean(stresses * np.sin(omega * times))
        cos_part = 2 * np.mean(stresses * np.cos(omega * times))
        g_store, g_loss = eval_moduli(series, omega)
        assert sin_part / (MU * amp) == pytest.approx(g_store, rel=0.01)
        assert cos_part / (MU * amp) == pytest.approx(g_loss, rel=0.01)


class TestFluidStress:
    AIR = cst.FluidMaterial(bulk_modulus=0.14e6, shear_viscosity=1.83e-5,
                            volume_viscosity=0.0, density=100.0)

    def test_rest_state_is_stress_free(self):
        sigma = cst.fluid_stress(1.0, np.zeros((3, 3)), self.AIR, p_act=0.0)
        np.testing.assert_array_equal(sigma, np.zeros((3, 3)))

    def test_actuation_pushes_outward(self):
        sigma = cst.fluid_stress(1.0, np.zeros((3, 3)), self.AIR, p_act=50e3)
        np.testing.assert_allclose(sigma, 50e3 * np.eye(3))

    def test_compression_pressure(self):
        # compressed air carries compressive stress of magnitude k (1 - J);
        # the opposite sign would make the chamber acoustically unstable
        sigma = cst.fluid_stress(0.95, np.zeros((3, 3)), self.AIR, p_act=0.0)
        np.testing.assert_allclose(sigma, -7.0e3 * np.eye(3), rtol=1e-12)

    def test_acoustic_restoring_force_sign(self):
        # a compressed region must push outward: sigma_xx decreases with J
        s_compressed = cst.fluid_stress(0.99, np.zeros((3, 3)), self.AIR)[0, 0]
        s_expanded = cst.fluid_stress(1.01, np.zeros((3, 3)), self.AIR)[0, 0]
        assert s_compressed < 0 < s_expanded

    def test_linear_in_actuation_pressure(self):
        rng = np.random.default_rng(2)
        grad_u = rng.standard_normal((3, 3))
        s0 = cst.fluid_stress(0.98, grad_u, self.AIR, p_act=0.0)
        s1 = cst.fluid_stress(0.98, grad_u, self.AIR, p_act=1234.5)
        np.testing.assert_allclose(s1 - s0, 1234.5 * np.eye(3), atol=1e-9)

    def test_viscous_part(self):
        grad_u = np.array([[0.0, 2.0], [0.0, 0.0]])
        mat = cst.FluidMaterial(bulk_modulus=1e5, shear_viscosity=0.5,
                                volume_viscosity=0.2)
        sigma = cst.fluid_stress(1.0, grad_u, mat)
        expected = 0.5 * (grad_u + grad_u.T)
        np.testing.assert_allclose(sigma, expected)

    def test_inverted_volume_rejected(self):
        with pytest.raises(InversionError):
            cst.fluid_stress(-0.1, np.zeros((2, 2)), self.AIR)


class TestActuationWaveform:
    def test_zero_before_start(self):
        wf = cst.ActuationWaveform.square_wave(80e3, 5.0, t_start=0.25)
        assert cst.sample_actuation(wf, 0.1) == 0.0

    def test_periodicity(self):
        wf = cst.ActuationWaveform.square_wave(80e3, 5.0, t_start=0.25)
        for t in np.linspace(0.3, 0.4, 7):
            a = cst.sample_actuation(wf, t)
            b = cst.sample_actuation(wf, t + 0.2)
            assert a == pytest.approx(b, rel=1e-12, abs=1e-9)

    def test_exact_at_sample_points(self):
        times = np.array([0.0, 0.04, 0.1, 0.15])
        pressures = np.array([0.0, 70e3, 80e3, 10e3])
        wf = cst.ActuationWaveform(times, pressures, period=0.2, t_start=0.0)
        for t, p in zip(times, pressures):
            assert cst.sample_actuation(wf, t) == pytest.approx(p, abs=1e-9)

    def test_square_wave_rises_and_decays(self):
        wf = cst.ActuationWaveform.square_wave(80e3, 5.0, rise_time=5e-3)
        p_mid = cst.sample_actuation(wf, 0.09)   # near end of the high half
        p_late = cst.sample_actuation(wf, 0.19)  # near end of the low half
        assert p_mid > 0.99 * 80e3
        assert p_late < 0.01 * 80e3

    def test_empty_table_rejected(self):
        with pytest.raises(ConfigurationError):
            cst.ActuationWaveform(np.array([]), np.array([]), period=0.2)

    def test_non_monotone_times_rejected(self):
        with pytest.raises(ConfigurationError):
            cst.ActuationWaveform(np.array([0.0, 0.1, 0.05]),
                                  np.array([0.0, 1.0, 2.0]), period=0.2)
