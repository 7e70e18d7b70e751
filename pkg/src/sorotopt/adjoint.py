"""Reverse-mode gradients of the forward simulation with checkpointing.

The gradient of the locomotion objective with respect to the raw design
variables is computed by a segment-wise reverse sweep: the forward pass
stores the particle state only at segment boundaries (about sqrt(N) of
them); the backward pass replays each segment from its checkpoint and pulls
the state cotangent back through it, accumulating the density cotangent
contributed by every step (the density enters each step through particle
masses and interpolated moduli). Because the forward integrator is bitwise
deterministic, the replayed states match the original pass exactly.

Where the no-slip clamp fired, the clamped nodal velocity is a constant
zero in the traced step, so its derivative contribution is zero: contact is
handled as a subgradient, and the count of clamp activations is reported so
callers can judge how trustworthy the gradient is near contact.

The density cotangent is finally chained through the sigmoid projection and
the filter transpose to reach the raw variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import jax.numpy as jnp
import numpy as np

from .design import DesignField, constraint_gradient, constraint_value
from .errors import CapacityError, ConfigurationError, NumericsError
from .mpm import SimEngine, SimState

__all__ = [
    "CheckpointPlan",
    "GradientResult",
    "plan_checkpoints",
    "gradient",
    "finite_difference_check",
]


@dataclass(frozen=True)
class CheckpointPlan:
    """Segmentation of the time axis for the reverse sweep."""

    n_steps: int
    segment_length: int
    boundaries: np.ndarray  # segment start indices, ascending, first is 0
    memory_estimate_bytes: Optional[int] = None

    @property
    def n_stored_states(self) -> int:
        return len(self.boundaries)

    def segments(self):
        """Yield (start, stop) pairs partitioning [0, n_steps)."""
        edges = np.concatenate([self.boundaries, [self.n_steps]])
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def plan_checkpoints(n_steps: int, memory_budget_bytes: Optional[int] = None,
                     state_nbytes: Optional[int] = None,
                     forced_boundaries=()) -> CheckpointPlan:
    """Choose the segment length for checkpointed reverse-mode replay.

    The default segment length ceil(sqrt(n_steps)) stores O(sqrt(N)) states.
    A memory budget (with the per-state size) overrides it: the number of
    stored checkpoints is capped at budget // state_nbytes, which lengthens
    the segments while the recompute cost stays O(N).
    """
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    seg = math.ceil(math.sqrt(n_steps))
    estimate = None
    if memory_budget_bytes is not None:
        if state_nbytes is None or state_nbytes <= 0:
            raise ConfigurationError("state_nbytes is required with a memory budget")
        max_states = memory_budget_bytes // state_nbytes
        if max_states < 2:
            raise CapacityError(
                "memory budget below one checkpoint state plus one segment tape")
        seg = max(seg, math.ceil(n_steps / max_states))
    boundaries = np.arange(0, n_steps, seg, dtype=int)
    boundaries = np.unique(np.concatenate(
        [boundaries, np.asarray(forced_boundaries, dtype=int)]))
    boundaries = boundaries[(boundaries >= 0) & (boundaries < n_steps)]
    if state_nbytes:
        estimate = int((len(boundaries) + seg) * state_nbytes)
    return CheckpointPlan(n_steps, seg, boundaries, estimate)


@dataclass
class GradientResult:
    """Design sensitivity plus the forward quantities it was built from."""

    dphi: np.ndarray
    objective: float
    constraint: float
    xg_start: np.ndarray
    xg_end: np.ndarray
    total_design_mass: float
    clamp_activations: int
    d_objective_d_density: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def gradient(engine: SimEngine, design: DesignField, auglag=None,
             gravity_scale: float = 1.0, plan: Optional[CheckpointPlan] = None,
             check_replay: bool = False) -> GradientResult:
    """Sensitivity of the (augmented) objective w.r.t. the raw design variables.

    With ``auglag`` given (an :class:`~sorotopt.optimizer.AugLagState`), the
    returned ``dphi`` is the ascent direction of
    L - lambda v - (rho/2) v^2 with v = max(0, C - C_max); otherwise it is
    the gradient of the plain objective L.

    ``check_replay`` additionally verifies that the states regenerated
    during the reverse sweep are bitwise identical to the forward pass.
    """
    density = design.density
    n_steps = engine.clock.n_steps
    start_step = engine.clock.start_step
    if n_steps == 0 or start_step == n_steps:
        # zero-length objective window: L is identically zero
        summary = engine.run_forward(density, gravity_scale)
        return GradientResult(
            dphi=np.zeros(design.n), objective=0.0,
            constraint=constraint_value(density), xg_start=summary.xg_start,
            xg_end=summary.xg_end, total_design_mass=summary.total_design_mass,
            clamp_activations=summary.clamp_activations,
            d_objective_d_density=np.zeros_like(density),
            diagnostics={"n_segments": 0, "peak_stored_states": 1})

    if plan is None:
        plan = plan_checkpoints(n_steps, forced_boundaries=(start_step,))
    elif start_step not in plan.boundaries and 0 < start_step < n_steps:
        plan = plan_checkpoints(n_steps, forced_boundaries=(start_step,))

    # forward sweep: store the state at every segment boundary
    states = {0: engine.initial_state()}
    clamps = 0
    state = states[0]
    for lo, hi in plan.segments():
        state, diag = engine.run_segment(state, density, gravity_scale, lo, hi - lo)
        states[hi] = state
        clamps += int(np.asarray(diag.clamp_count).sum())
    final_state = states[n_steps]

    xg_end = engine.center_of_gravity(final_state, density)
    start_state = states[start_step] if start_step in states else states[0]
    xg_start = engine.center_of_gravity(start_state, density)
    objective = float((xg_end - xg_start) @ engine.direction)
    constraint = constraint_value(density)

    # reverse sweep
    ct_state, ct_density = engine.xg_cotangents(final_state, density)
    ct_density = jnp.asarray(ct_density)
    for lo, hi in reversed(plan.segments()):
        if check_replay:
            # replaying the forward segment from its checkpoint must hit the
            # stored boundary state bit for bit; the vjp below relies on it
            replay, _ = engine.run_segment(states[lo], density, gravity_scale,
                                           lo, hi - lo)
            for a, b in zip(replay, states[hi]):
                if not bool(jnp.all(a == b)):
                    raise NumericsError(
                        f"segment replay diverged from the forward pass at step {hi}")
        _, ct_state, ct_inc = engine.segment_vjp(
            states[lo], density, gravity_scale, lo, hi - lo, ct_state)
        ct_density = ct_density + ct_inc
        if lo == start_step:
            ct_s, ct_d = engine.xg_cotangents(states[lo], density)
            ct_state = SimState(*(a - b for a, b in zip(ct_state, ct_s)))
            ct_density = ct_density - ct_d

    d_obj_d_density = np.asarray(ct_density)
    if not np.all(np.isfinite(d_obj_d_density)):
        raise NumericsError("non-finite adjoint density sensitivity")

    combined = d_obj_d_density
    if auglag is not None:
        violation = max(0.0, constraint - auglag.c_max)
        combined = combined - (auglag.multiplier + auglag.penalty * violation) \
            * constraint_gradient(density)
    dphi = design.chain_to_raw(combined)
    if not np.all(np.isfinite(dphi)):
        raise NumericsError("non-finite design sensitivity")

    return GradientResult(
        dphi=dphi, objective=objective, constraint=constraint,
        xg_start=xg_start, xg_end=xg_end,
        total_design_mass=float(engine.design_masses(density).sum()),
        clamp_activations=clamps,
        d_objective_d_density=d_obj_d_density,
        diagnostics={
            "n_segments": len(plan.segments()),
            "segment_length": plan.segment_length,
            "peak_stored_states": plan.n_stored_states + plan.segment_length,
        })


def finite_difference_check(engine: SimEngine, design: DesignField, indices,
                            delta: float = 1e-4, gravity_scale: float = 1.0,
                            epsilon_abs: float = 1e-12):
    """Central-difference validation of the adjoint gradient.

    Runs two perturbed forward simulations per probed variable and reports
    the relative disagreement |fd - g| / max(|g|, epsilon_abs) together with
    both values. Larger disagreement is expected (and reported, not failed)
    when the contact clamp was active during the run.
    """
    if delta <= 0:
        raise ConfigurationError("delta must be positive")
    indices = np.asarray(indices, dtype=int)
    if indices.size and (indices.min() < 0 or indices.max() >= design.n):
        raise ConfigurationError("probe index out of range")
    result = gradient(engine, design, gravity_scale=gravity_scale)
    errors = np.zeros(indices.size)
    fd_values = np.zeros(indices.size)
    adj_values = result.dphi[indices]
    for k, i in enumerate(indices):
        for sign in (+1.0, -1.0):
            phi = design.values.copy()
            phi[i] = np.clip(phi[i] + sign * delta, -1.0, 1.0)
            summary = engine.run_forward(design.with_values(phi).density,
                                         gravity_scale)
            fd_values[k] += sign * summary.objective
        fd_values[k] /= 2.0 * delta
        denom = max(abs(adj_values[k]), epsilon_abs)
        errors[k] = abs(fd_values[k] - adj_values[k]) / denom
        if adj_values[k] == 0.0 and fd_values[k] == 0.0:
            errors[k] = 0.0
    return {
        "indices": indices,
        "relative_errors": errors,
        "finite_differences": fd_values,
        "adjoint": adj_values,
        "clamp_activations": result.clamp_activations,
    }
