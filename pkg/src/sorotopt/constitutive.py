"""Stress evaluation for visco-hyperelastic solids and pressurized chamber air.

The solid model is a compressible neo-Hookean base in a generalized Maxwell
chain. With J = det F and Fbar = J^(-1/3) F, the Cauchy stress is

    sigma = dPsiH/dJ I  +  g_inf dev(sigma0D)  +  dev(sum_i sigma_i)

    dPsiH/dJ = (K/2) ((J - 1) + ln(J)/J)          (volumetric response)
    sigma0D  = (mu/J) Fbar Fbar^T                 (equilibrium deviatoric)

and each Maxwell element carries the hereditary deviatoric stress

    sigma_i = g_i Fbar [ integral exp(-(t-t')/tau_i)
                         d/dt'( Fbar^-1 dev(sigma0D) Fbar^-T ) dt' ] Fbar^T.

The hereditary integral is advanced one step at a time by an exponential
recursion that is exact for inputs with a constant rate within the step
(see :func:`maxwell_advance`).

The chamber air is a weakly compressible Newtonian fluid:

    sigma = -p I + mu_v (L + L^T) + (zeta - 2/3 mu_v) tr(L) I
    p     = -k (1 - J) - p_act

where p_act is the actuation pressure offset sampled from a periodic
waveform.

Fictitious-density interpolation scales density and both Lame constants by
the same cubic factor (1 - eps) g^3 + eps, which keeps the material wave
speed independent of the design density.

All tensor routines accept arbitrary leading batch dimensions and are
written with jax.numpy so the simulation engine can trace them; they accept
plain numpy arrays as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import jax.numpy as jnp
import numpy as np

from .errors import ConfigurationError, InversionError, NumericsError
from .prony import PronySeries

_EYE3 = np.eye(3)


# ---------------------------------------------------------------------------
# small batched 3x3 helpers (hand-rolled: much faster than LAPACK on CPU and
# transparent to reverse-mode differentiation)
# ---------------------------------------------------------------------------

def det3(a):
    """Determinant of (..., 3, 3) arrays."""
    return (
        a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
        - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
        + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
    )


def inv3(a):
    """Inverse of (..., 3, 3) arrays via the adjugate."""
    c00 = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    c01 = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
    c02 = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
    c10 = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    c11 = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    c12 = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
    c20 = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    c21 = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    c22 = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    det = a[..., 0, 0] * c00 + a[..., 0, 1] * c01 + a[..., 0, 2] * c02
    adj = jnp.stack(
        [
            jnp.stack([c00, c10, c20], axis=-1),
            jnp.stack([c01, c11, c21], axis=-1),
            jnp.stack([c02, c12, c22], axis=-1),
        ],
        axis=-2,
    )
    return adj / det[..., None, None]


def deviator(a):
    """Trace-free part dev(A) = A - (tr A / 3) I for (..., 3, 3) arrays."""
    tr = (a[..., 0, 0] + a[..., 1, 1] + a[..., 2, 2]) / 3.0
    return a - tr[..., None, None] * _EYE3


# ---------------------------------------------------------------------------
# materials
# ---------------------------------------------------------------------------

def lame_parameters(youngs_modulus: float, poisson_ratio: float) -> tuple[float, float]:
    """Convert (E, nu) to the Lame constants (lambda, mu)."""
    if youngs_modulus <= 0:
        raise ConfigurationError("Young's modulus must be positive")
    if not -1.0 < poisson_ratio < 0.5:
        raise ConfigurationError("Poisson's ratio must lie in (-1, 0.5)")
    lam = youngs_modulus * poisson_ratio / ((1 + poisson_ratio) * (1 - 2 * poisson_ratio))
    mu = youngs_modulus / (2 * (1 + poisson_ratio))
    return lam, mu


@dataclass(frozen=True)
class SolidMaterial:
    """Base (gamma = 1) properties of the printable soft solid."""

    density: float
    lam: float
    mu: float
    prony: PronySeries = field(default_factory=lambda: PronySeries(1.0))
    void_epsilon: float = 1.0e-6

    def __post_init__(self):
        if self.density <= 0:
            raise ConfigurationError("solid density must be positive")
        if self.mu <= 0 or 3 * self.lam + 2 * self.mu <= 0:
            raise ConfigurationError("Lame constants must give positive moduli")
        if not 0 < self.void_epsilon < 1:
            raise ConfigurationError("void_epsilon must lie in (0, 1)")

    @classmethod
    def from_youngs_poisson(cls, youngs_modulus, poisson_ratio, density, **kw):
        lam, mu = lame_parameters(youngs_modulus, poisson_ratio)
        return cls(density=density, lam=lam, mu=mu, **kw)

    @property
    def bulk_modulus(self) -> float:
        return (3 * self.lam + 2 * self.mu) / 3.0

    @property
    def instantaneous_mu(self) -> float:
        """Shear modulus at t -> 0+: mu scaled by the total relative modulus."""
        return self.mu * self.prony.total_relative_modulus

    def with_prony(self, series: PronySeries) -> "SolidMaterial":
        return replace(self, prony=series)


@dataclass(frozen=True)
class FluidMaterial:
    """Weakly compressible chamber air (density usually artificial, for CFL)."""

    bulk_modulus: float
    shear_viscosity: float = 0.0
    volume_viscosity: float = 0.0
    density: float = 100.0

    def __post_init__(self):
        if self.bulk_modulus <= 0:
            raise ConfigurationError("fluid bulk modulus must be positive")
        if self.shear_viscosity < 0 or self.volume_viscosity < 0:
            raise ConfigurationError("viscosities must be nonnegative")
        if self.density <= 0:
            raise ConfigurationError("fluid density must be positive")


# ---------------------------------------------------------------------------
# fictitious-density property interpolation
# ---------------------------------------------------------------------------

def density_scale(gamma, void_epsilon):
    """Cubic interpolation factor (1 - eps) gamma^3 + eps."""
    return (1.0 - void_epsilon) * gamma**3 + void_epsilon


def interpolate_properties(gamma, material: SolidMaterial):
    """Interpolated (density, lambda, mu) at fictitious density ``gamma``.

    Raises if any value is outside [0, 1].
    """
    g = np.asarray(gamma, dtype=float)
    if np.any(g < 0) or np.any(g > 1):
        raise ConfigurationError("fictitious density must lie in [0, 1]")
    scale = density_scale(g, material.void_epsilon)
    return material.density * scale, material.lam * scale, material.mu * scale


# ---------------------------------------------------------------------------
# solid stress
# ---------------------------------------------------------------------------

def neo_hookean_energy(f, lam, mu):
    """Stored energy PsiH + PsiD of the compressible neo-Hookean base.

    PsiH(J) = K/4 ((J-1)^2 + ln^2 J), PsiD(Fbar) = mu/2 (tr(Fbar^T Fbar) - 3).
    Used by tests as the finite-difference oracle for the elastic stress.
    """
    j = det3(f)
    k = (3.0 * lam + 2.0 * mu) / 3.0
    psi_h = 0.25 * k * ((j - 1.0) ** 2 + jnp.log(j) ** 2)
    i1 = (f * f).sum(axis=(-2, -1))
    psi_d = 0.5 * mu * (j ** (-2.0 / 3.0) * i1 - 3.0)
    return psi_h + psi_d


def elastic_stress_parts(f, lam, mu):
    """Per-particle elastic quantities shared by the solver and the adjoint.

    Returns ``(j, f_bar, sigma_h, dev_sigma0d)`` where ``sigma_h`` is the
    scalar multiplying the identity and ``dev_sigma0d`` the trace-free
    equilibrium deviatoric stress.
    """
    j = det3(f)
    f_bar = j[..., None, None] ** (-1.0 / 3.0) * f
    k = (3.0 * lam + 2.0 * mu) / 3.0
    sigma_h = 0.5 * k * ((j - 1.0) + jnp.log(j) / j)
    b_bar = f_bar @ jnp.swapaxes(f_bar, -1, -2)
    dev_sigma0d = deviator((mu / j)[..., None, None] * b_bar)
    return j, f_bar, sigma_h, dev_sigma0d


def maxwell_pullback(f_bar, dev_sigma0d):
    """Material-frame hereditary input q = Fbar^-1 dev(sigma0D) Fbar^-T."""
    f_inv = inv3(f_bar)
    return f_inv @ dev_sigma0d @ jnp.swapaxes(f_inv, -1, -2)


def solid_stress(f, visco_history, material: SolidMaterial, gamma=1.0):
    """Cauchy stress of the visco-hyperelastic solid at fictitious density.

    ``visco_history`` holds one material-frame hereditary tensor per active
    Maxwell element, shape (..., n_elements, 3, 3); pass an empty array for
    a purely elastic response. Moduli are interpolated by ``gamma`` first.
    """
    f = jnp.asarray(f, dtype=jnp.float64)
    j = np.asarray(det3(f))
    if np.any(~np.isfinite(np.asarray(f))):
        raise NumericsError("non-finite deformation gradient")
    if np.any(j <= 0):
        raise InversionError(int(np.argmax(np.atleast_1d(j <= 0))))
    _, lam, mu = interpolate_properties(gamma, material)
    series = material.prony
    q = jnp.asarray(visco_history, dtype=jnp.float64)
    if q.size and q.shape[-3] != series.n_elements:
        raise ConfigurationError("visco_history does not match the Prony series")
    _, f_bar, sigma_h, dev_s0 = elastic_stress_parts(f, jnp.asarray(lam), jnp.asarray(mu))
    sigma = sigma_h[..., None, None] * _EYE3 + series.g_inf * dev_s0
    if series.n_elements:
        pushed = f_bar[..., None, :, :] @ q @ jnp.swapaxes(f_bar, -1, -2)[..., None, :, :]
        sigma_mx = jnp.einsum("k,...kij->...ij", jnp.asarray(series.moduli), pushed)
        sigma = sigma + deviator(sigma_mx)
    out = np.asarray(sigma)
    if np.any(~np.isfinite(out)):
        raise NumericsError("non-finite stress")
    return out


def maxwell_advance(history, input_prev, input_new, dt, element, f_bar=None):
    """Advance one Maxwell element's hereditary integral by one step.

    The integral h(t) = int exp(-(t-t')/tau) qdot dt' is updated with

        h <- exp(-dt/tau) h + (1 - exp(-dt/tau)) (tau/dt) (q_new - q_prev)

    which is the exact solution when the input rate is constant within the
    step. ``element`` is the ``(g, tau)`` pair; the returned stress
    contribution is the updated history pushed forward by ``f_bar``
    (identity if omitted) and scaled by g:  g * Fbar h Fbar^T.

    Returns ``(history_new, stress_contribution)``.
    """
    g, tau = element
    if dt <= 0 or tau <= 0:
        raise ConfigurationError("dt and tau must be positive")
    h = jnp.asarray(history, dtype=jnp.float64)
    decay = jnp.exp(-dt / tau)
    gain = (1.0 - decay) * (tau / dt)
    h_new = decay * h + gain * (jnp.asarray(input_new) - jnp.asarray(input_prev))
    if f_bar is None:
        pushed = h_new
    else:
        f_bar = jnp.asarray(f_bar)
        pushed = f_bar @ h_new @ jnp.swapaxes(f_bar, -1, -2)
    return np.asarray(h_new), np.asarray(g * pushed)


# ---------------------------------------------------------------------------
# fluid stress
# ---------------------------------------------------------------------------

def fluid_pressure(j, material: FluidMaterial, p_act):
    """Chamber pressure p = k (1 - J) - p_act.

    Thermodynamic sign convention: compression (J < 1) raises the pressure,
    so acoustic perturbations are restored with sound speed sqrt(k / rho),
    and the actuation offset p_act appears as an outward push sigma =
    +p_act I at J = 1.
    """
    return material.bulk_modulus * (1.0 - j) - p_act


def fluid_stress(j, grad_u, material: FluidMaterial, p_act=0.0):
    """Cauchy stress of the weakly compressible viscous chamber air.

    ``grad_u`` is the spatial velocity gradient (d x d, batched); the
    identity blocks match its dimension.
    """
    j = jnp.asarray(j, dtype=jnp.float64)
    if np.any(np.asarray(j) <= 0):
        raise InversionError(int(np.argmax(np.atleast_1d(np.asarray(j) <= 0))))
    grad_u = jnp.asarray(grad_u, dtype=jnp.float64)
    d = grad_u.shape[-1]
    eye = jnp.eye(d)
    p = fluid_pressure(j, material, p_act)
    div_u = jnp.trace(grad_u, axis1=-2, axis2=-1)
    sigma = (
        -p[..., None, None] * eye
        + material.shear_viscosity * (grad_u + jnp.swapaxes(grad_u, -1, -2))
        + (material.volume_viscosity - 2.0 / 3.0 * material.shear_viscosity)
        * div_u[..., None, None]
        * eye
    )
    return np.asarray(sigma)


# ---------------------------------------------------------------------------
# actuation waveform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActuationWaveform:
    """Periodic chamber-pressure offset, zero before ``t_start``.

    ``times`` are sample instants within one period (strictly increasing,
    starting at 0); ``pressures`` are the matching offsets in Pa. Between
    samples the waveform is interpolated linearly, wrapping the last sample
    to the first at ``period``.
    """

    times: np.ndarray
    pressures: np.ndarray
    period: float
    t_start: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "pressures", np.asarray(self.pressures, dtype=float))
        if self.times.size == 0:
            raise ConfigurationError("waveform table is empty")
        if self.times.size != self.pressures.size:
            raise ConfigurationError("waveform columns must have equal lengths")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("waveform times must be strictly increasing")
        if not np.all(np.isfinite(self.pressures)):
            raise ConfigurationError("waveform pressures must be finite")
        if self.period <= 0 or self.times[0] < 0 or self.times[-1] >= self.period:
            raise ConfigurationError("waveform times must lie within one period")

    def padded_table(self):
        """Sample table extended to cover [0, period] for periodic interpolation."""
        t = self.times
        p = self.pressures
        if t[0] > 0:
            # wrap the tail value in front so phase 0 interpolates correctly
            t = np.concatenate([[0.0], t])
            p = np.concatenate([[_wrap_front(self)], p])
        return np.concatenate([t, [self.period]]), np.concatenate([p, [p[0]]])

    @classmethod
    def square_wave(cls, amplitude, frequency, t_start=0.0, rise_time=5.0e-3,
                    samples_per_half=64):
        """Synthetic 1:1 duty square wave with an exponential rise/decay.

        Stand-in for a measured pressure trace: the offset climbs toward
        ``amplitude`` with time constant ``rise_time`` during the first half
        period and decays toward zero during the second half.
        """
        if amplitude < 0 or frequency <= 0 or rise_time <= 0:
            raise ConfigurationError("amplitude, frequency and rise_time must be positive")
        period = 1.0 / frequency
        half = period / 2.0
        th = np.linspace(0.0, half, samples_per_half, endpoint=False)
        rise = amplitude * (1.0 - np.exp(-th / rise_time))
        top = rise[-1] if samples_per_half else amplitude
        fall = top * np.exp(-th / rise_time)
        times = np.concatenate([th, half + th])
        pressures = np.concatenate([rise, fall])
        return cls(times=times, pressures=pressures, period=period, t_start=t_start)


def _wrap_front(waveform: ActuationWaveform) -> float:
    """Value at phase 0 when the first sample sits after 0: wrap-interpolate."""
    t0, p0 = waveform.times[0], waveform.pressures[0]
    t1, p1 = waveform.times[-1], waveform.pressures[-1]
    gap = waveform.period - t1 + t0
    return p1 + (p0 - p1) * (waveform.period - t1) / gap


def sample_actuation_padded(t, t_start, period, times_ext, pressures_ext):
    """Traceable waveform sampler used inside the simulation step."""
    phase = jnp.mod(t - t_start, period)
    value = jnp.interp(phase, times_ext, pressures_ext)
    return jnp.where(t < t_start, 0.0, value)


def sample_actuation(waveform: ActuationWaveform, t):
    """Actuation pressure at time ``t`` (scalar or array), in Pa."""
    if np.any(np.asarray(t) < 0):
        raise ConfigurationError("time must be nonnegative")
    times_ext, pressures_ext = waveform.padded_table()
    out = sample_actuation_padded(
        jnp.asarray(t, dtype=jnp.float64), waveform.t_start, waveform.period,
        times_ext, pressures_ext,
    )
    return float(out) if np.ndim(t) == 0 else np.asarray(out)
