"""Outer optimization loop: Adam ascent under an augmented Lagrangian.

Each iteration runs the forward simulation and its adjoint, averages the
sensitivity over declared symmetry planes, takes one Adam step on the raw
design variables (clamped to [-1, 1]), and updates the constraint
multiplier and penalty. The constraint on intermediate density enters the
objective as

    L_aug = L - lambda v - (rho / 2) v^2,    v = max(0, C - C_max),

with the first-order multiplier update lambda <- max(0, lambda + rho v)
and a scheduled, nondecreasing penalty weight. Climbing scenarios ramp
gravity in stairs of 20 iterations from zero to full over the first 200.

Convergence is declared when the mean objective over the last four
iterations changed by less than 0.1% relative to the mean over the four
before that, and the constraint is feasible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .adjoint import gradient
from .design import DesignField, SymmetryMap, symmetrize_gradient
from .errors import ConfigurationError, NumericsError, SimulationError
from .mpm import SimEngine

log = logging.getLogger(__name__)

FULL_GRAVITY_ITERATIONS = 200
GRAVITY_STAIR_WIDTH = 20
CONVERGENCE_WINDOW = 4
CONVERGENCE_RTOL = 1e-3
FEASIBILITY_SLACK = 1e-3


# ---------------------------------------------------------------------------
# optimizer state
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates for the Adam ascent step."""

    m: np.ndarray
    v: np.ndarray
    count: int = 0
    learning_rate: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 0.02, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), learning_rate=learning_rate, **kw)


@dataclass(frozen=True)
class AugLagState:
    """Multiplier and penalty of the augmented Lagrangian."""

    c_max: float = 0.0125
    multiplier: float = 0.0
    penalty: float = 1.0
    growth_factor: float = 2.0
    growth_every: int = 50
    activation_iteration: int = 50

    def __post_init__(self):
        if self.multiplier < 0 or self.penalty <= 0:
            raise ConfigurationError("multiplier must be >= 0 and penalty > 0")


@dataclass
class HistoryRecord:
    iteration: int
    objective: float
    constraint: float
    xg: np.ndarray
    mass: float
    gravity: float
    multiplier: float
    penalty: float
    seconds: float


@dataclass
class OptimizationHistory:
    """Append-only per-iteration log of the optimization run."""

    records: list = field(default_factory=list)

    def append(self, record: HistoryRecord):
        if self.records and record.iteration != self.records[-1].iteration + 1:
            raise ConfigurationError("history iterations must be contiguous")
        if not self.records and record.iteration != 0:
            raise ConfigurationError("history must start at iteration 0")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def constraints(self) -> np.ndarray:
        return np.array([r.constraint for r in self.records])


# ---------------------------------------------------------------------------
# individual operations
# ---------------------------------------------------------------------------

def augmented_objective(objective: float, constraint: float, state: AugLagState,
                        c_max: Optional[float] = None) -> float:
    """Value being maximized: L - lambda v - (rho/2) v^2."""
    c_max = state.c_max if c_max is None else c_max
    violation = max(0.0, constraint - c_max)
    return objective - state.multiplier * violation - 0.5 * state.penalty * violation**2


def adam_update(values: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam ascent step, clamped to [-1, 1]; mutates ``state``.

    A non-finite gradient aborts without touching the moments.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != values.shape:
        raise ConfigurationError("gradient and design shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericsError("non-finite gradient; iteration aborted")
    state.count += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = state.m / (1 - state.beta1**state.count)
    v_hat = state.v / (1 - state.beta2**state.count)
    step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return np.clip(values + step, -1.0, 1.0)


def update_multipliers(constraint: float, state: AugLagState,
                       iteration: int) -> AugLagState:
    """First-order multiplier update plus the scheduled penalty growth.

    The penalty stays minimal until the activation iteration, then grows by
    the configured factor every ``growth_every`` iterations; it never
    decreases.
    """
    violation = max(0.0, constraint - state.c_max)
    multiplier = max(0.0, state.multiplier + state.penalty * violation)
    penalty = state.penalty
    if (iteration >= state.activation_iteration
            and (iteration - state.activation_iteration) % state.growth_every == 0):
        penalty *= state.growth_factor
    return replace(state, multiplier=multiplier, penalty=penalty)


def gravity_schedule(iteration: int, ramp_enabled: bool,
                     full_magnitude: float = 9.8) -> float:
    """Stair-step gravity ramp used by climbing scenarios.

    With the ramp enabled the magnitude rises from zero in stairs of
    ``GRAVITY_STAIR_WIDTH`` iterations, reaching the full value at
    ``FULL_GRAVITY_ITERATIONS``; otherwise it is constant.
    """
    if iteration < 0:
        raise ConfigurationError("iteration must be nonnegative")
    if not ramp_enabled:
        return full_magnitude
    stairs = FULL_GRAVITY_ITERATIONS // GRAVITY_STAIR_WIDTH
    return full_magnitude * min(1.0, (iteration // GRAVITY_STAIR_WIDTH) / stairs)


def convergence_check(history: OptimizationHistory, c_max: float,
                      epsilon_abs: float = 1e-12) -> bool:
    """Relative change of the averaged objective below 0.1%, and feasible.

    Compares the mean over the last four iterations against the mean over
    the four before that; needs at least eight recorded iterations. While a
    gravity ramp is still in progress the problem itself keeps changing, so
    the caller must not consult this check until the ramp has completed.
    """
    if len(history) < 2 * CONVERGENCE_WINDOW:
        return False
    objectives = history.objectives
    recent = objectives[-CONVERGENCE_WINDOW:].mean()
    previous = objectives[-2 * CONVERGENCE_WINDOW:-CONVERGENCE_WINDOW].mean()
    change = abs(recent - previous) / max(abs(previous), epsilon_abs)
    feasible = history.constraints[-1] <= c_max + FEASIBILITY_SLACK
    return bool(change < CONVERGENCE_RTOL and feasible)


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

@dataclass
class BestDesign:
    """Best-so-far iterate, preferred feasible-first then by objective."""

    values: np.ndarray
    objective: float = -np.inf
    iteration: int = -1
    feasible: bool = False


@dataclass
class OptimizationResult:
    design: DesignField
    history: OptimizationHistory
    best: BestDesign
    converged: bool
    adam: AdamState
    auglag: AugLagState

    @property
    def best_values(self) -> np.ndarray:
        return self.best.values

    @property
    def best_objective(self) -> float:
        return self.best.objective

    @property
    def best_iteration(self) -> int:
        return self.best.iteration


def optimize(engine: SimEngine, design: DesignField, max_iterations: int,
             auglag: Optional[AugLagState] = None,
             adam: Optional[AdamState] = None,
             symmetry: Optional[SymmetryMap] = None,
             gravity_ramp: bool = False,
             start_iteration: int = 0,
             history: Optional[OptimizationHistory] = None,
             best: Optional[BestDesign] = None,
             callback: Optional[Callable] = None) -> OptimizationResult:
    """Run the forward/adjoint/update loop until convergence or the budget.

    The best feasible design seen so far is tracked separately from the
    last iterate (pass ``best`` to carry it across a resume); exports
    default to it. A simulation failure aborts the loop cleanly with the
    partial history preserved.
    """
    auglag = auglag or AugLagState()
    adam = adam or AdamState.zeros(design.n)
    history = history or OptimizationHistory()
    best = best or BestDesign(values=design.values.copy())
    converged = False

    iteration = start_iteration
    for iteration in range(start_iteration, max_iterations):
        tic = time.perf_counter()
        g_mag = gravity_schedule(iteration, gravity_ramp, engine.gravity_magnitude)
        scale = g_mag / engine.gravity_magnitude if engine.gravity_magnitude else 1.0
        try:
            result = gradient(engine, design, auglag=auglag, gravity_scale=scale)
            grad = result.dphi
            if symmetry is not None:
                grad = symmetrize_gradient(grad, symmetry)
            new_values = adam_update(design.values, grad, adam)
        except SimulationError as exc:
            log.error("iteration %d aborted: %s", iteration, exc)
            break

        # lexicographic preference: feasibility first, then objective
        feasible = result.constraint <= auglag.c_max + FEASIBILITY_SLACK
        if (feasible, result.objective) > (best.feasible, best.objective):
            best = BestDesign(values=design.values.copy(),
                              objective=result.objective,
                              iteration=iteration, feasible=feasible)

        design = design.with_values(new_values)
        auglag = update_multipliers(result.constraint, auglag, iteration)
        history.append(HistoryRecord(
            iteration=iteration, objective=result.objective,
            constraint=result.constraint, xg=result.xg_end,
            mass=result.total_design_mass, gravity=g_mag,
            multiplier=auglag.multiplier, penalty=auglag.penalty,
            seconds=time.perf_counter() - tic))
        if callback is not None:
            callback(iteration, design, result, history, best)
        log.info("iter %3d  L=%.6g m  C=%.4g  g=%.2f  lambda=%.3g rho=%.3g",
                 iteration, result.objective, result.constraint, g_mag,
                 auglag.multiplier, auglag.penalty)
        # a plateau means nothing while gravity is still being ramped up
        ramp_settled = not gravity_ramp or iteration >= FULL_GRAVITY_ITERATIONS
        if ramp_settled and convergence_check(history, auglag.c_max):
            converged = True
            break

    return OptimizationResult(
        design=design, history=history, best=best,
        converged=converged, adam=adam, auglag=auglag)
