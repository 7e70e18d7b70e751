"""Prony-series representation of viscoelastic moduli and its estimation.

A generalized Maxwell material is summarized by an equilibrium relative
modulus ``g_inf`` and a set of Maxwell elements ``(g_i, tau_i)``. The
storage and loss moduli of that series are

    G'(w) = g_inf + sum_i g_i w^2 tau_i^2 / (1 + w^2 tau_i^2)
    G''(w) =        sum_i g_i w tau_i     / (1 + w^2 tau_i^2)

``fit_prony`` estimates the relative moduli from a frequency-domain master
curve with the relaxation times fixed log-equally over a given range. With
the times fixed the model is linear in the moduli, so the relative-error
objective reduces to a nonnegative linear least-squares problem which is
solved globally instead of with a general reduced-gradient search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import ConfigurationError, FitError

# Fits above this frequency are not representable by the intended MPM time
# step and are excluded from the objective.
MAX_FIT_FREQUENCY = 1.0e7  # rad/s

# Retained relaxation times must span several simulation steps for the
# recursive integrator to resolve them.
DEFAULT_TRUNCATION_FACTOR = 10.0


@dataclass(frozen=True)
class PronySeries:
    """Relative moduli of a generalized Maxwell model.

    ``moduli[i]`` and ``taus[i]`` describe one Maxwell element; ``taus`` is
    ordered from slowest to fastest element (strictly decreasing).
    """

    g_inf: float
    moduli: np.ndarray = field(default_factory=lambda: np.empty(0))
    taus: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        object.__setattr__(self, "moduli", np.atleast_1d(np.asarray(self.moduli, dtype=float)))
        object.__setattr__(self, "taus", np.atleast_1d(np.asarray(self.taus, dtype=float)))
        if self.moduli.shape != self.taus.shape:
            raise ConfigurationError("moduli and taus must have matching lengths")
        if self.g_inf < 0 or np.any(self.moduli < 0):
            raise ConfigurationError("relative moduli must be nonnegative")
        if np.any(self.taus <= 0):
            raise ConfigurationError("relaxation times must be positive")
        if self.taus.size > 1 and not np.all(np.diff(self.taus) < 0):
            raise ConfigurationError("relaxation times must be strictly decreasing")

    @property
    def n_elements(self) -> int:
        return int(self.taus.size)

    @property
    def total_relative_modulus(self) -> float:
        """Instantaneous relative modulus g_inf + sum(g_i)."""
        return float(self.g_inf + self.moduli.sum())

    def scaled(self, factor: float) -> "PronySeries":
        """Return the series with all relative moduli multiplied by ``factor``."""
        return PronySeries(self.g_inf * factor, self.moduli * factor, self.taus)


@dataclass(frozen=True)
class MasterCurve:
    """Frequency sweep of storage/loss moduli at one reference temperature."""

    omega: np.ndarray
    storage: np.ndarray
    loss: np.ndarray
    reference_note: str = ""

    def __post_init__(self):
        for name in ("omega", "storage", "loss"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.omega.size == self.storage.size == self.loss.size):
            raise ConfigurationError("master curve columns must have equal lengths")
        if self.omega.size == 0:
            raise ConfigurationError("master curve is empty")
        if np.any(self.omega <= 0) or np.any(np.diff(self.omega) <= 0):
            raise ConfigurationError("frequencies must be positive and strictly increasing")
        if np.any(self.storage <= 0):
            raise ConfigurationError("storage modulus must be positive")


def eval_moduli(series: PronySeries, omega):
    """Storage and loss moduli of ``series`` at angular frequency ``omega``.

    Accepts a scalar or array of frequencies (rad/s, >= 0) and returns a
    matching pair ``(storage, loss)``.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise ConfigurationError("frequency must be nonnegative")
    wt = w[..., None] * series.taus  # (..., n_elements)
    denom = 1.0 + wt**2
    storage = series.g_inf + np.sum(series.moduli * wt**2 / denom, axis=-1)
    loss = np.sum(series.moduli * wt / denom, axis=-1)
    if np.isscalar(omega) or np.ndim(omega) == 0:
        return float(storage), float(loss)
    return storage, loss


def fit_prony(curve: MasterCurve, n_terms: int, tau_range: tuple[float, float]):
    """Fit relative moduli to a master curve with fixed relaxation times.

    ``n_terms`` relaxation times are placed log-equally across ``tau_range``
    (inclusive) and ordered slowest-first. The moduli g_inf, g_1..g_n are
    then the nonnegative least-squares solution of the relative-error
    objective

        e = sum_k [ ((G'(w_k) - F'(w_k)) / F'(w_k))^2
                  + ((G''(w_k) - F''(w_k)) / F''(w_k))^2 ]

    which is exactly a linear system in the moduli once each row is scaled
    by the measured value. Samples above ``MAX_FIT_FREQUENCY`` are dropped.

    Returns ``(series, residual)`` with ``residual`` the final value of e.
    """
    if n_terms < 1:
        raise ConfigurationError("n_terms must be >= 1")
    tau_lo, tau_hi = min(tau_range), max(tau_range)
    if tau_lo <= 0:
        raise ConfigurationError("relaxation-time range must be positive")
    if n_terms == 1:
        taus = np.array([np.sqrt(tau_lo * tau_hi)])
    else:
        taus = np.logspace(np.log10(tau_hi), np.log10(tau_lo), n_terms)

    keep = curve.omega < MAX_FIT_FREQUENCY
    omega = curve.omega[keep]
    storage = curve.storage[keep]
    loss = curve.loss[keep]
    n_rows = 2 * omega.size
    if n_rows < n_terms + 1:
        raise FitError(
            f"{omega.size} usable samples cannot determine {n_terms + 1} moduli"
        )

    wt = omega[:, None] * taus
    denom = 1.0 + wt**2
    # Columns: [g_inf, g_1 .. g_n]; rows: storage then loss, each scaled by
    # the measured value so the quadratic objective is the relative error.
    a_storage = np.hstack([np.ones((omega.size, 1)), wt**2 / denom]) / storage[:, None]
    with np.errstate(divide="ignore"):
        loss_scale = np.where(loss > 0, loss, np.inf)
    a_loss = np.hstack([np.zeros((omega.size, 1)), wt / denom]) / loss_scale[:, None]
    a = np.vstack([a_storage, a_loss])
    b = np.concatenate([np.ones(omega.size), np.where(loss > 0, 1.0, 0.0)])

    coeffs, _ = nnls(a, b)
    series = PronySeries(coeffs[0], coeffs[1:], taus)
    residual = fit_residual(series, MasterCurve(omega, storage, loss))
    return series, residual


def fit_residual(series: PronySeries, curve: MasterCurve) -> float:
    """Relative-error norm of ``series`` against ``curve``."""
    storage, loss = eval_moduli(series, curve.omega)
    err = np.sum(((storage - curve.storage) / curve.storage) ** 2)
    nonzero = curve.loss > 0
    err += np.sum(((loss[nonzero] - curve.loss[nonzero]) / curve.loss[nonzero]) ** 2)
    return float(err)


def truncate_for_dt(series: PronySeries, dt: float,
                    cutoff_factor: float = DEFAULT_TRUNCATION_FACTOR) -> PronySeries:
    """Drop Maxwell elements too fast for the simulation time step.

    Elements with ``tau_i < cutoff_factor * dt`` cannot be resolved by the
    recursive integrator and would also violate the CFL bound through their
    stiffness contribution; they are removed. ``g_inf`` is unchanged.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    keep = series.taus >= cutoff_factor * dt
    return PronySeries(series.g_inf, series.moduli[keep], series.taus[keep])
