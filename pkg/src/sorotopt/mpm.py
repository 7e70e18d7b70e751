"""MLS-MPM forward time integrator for solids and chamber air on one grid.

One simulation step comprises

  1. constitutive evaluation on particles (solid or fluid Cauchy stress),
  2. particle-to-grid transfer of mass and momentum with quadratic B-spline
     weights; the stress force and the affine momentum enter through the
     combined matrix  A_p = m_p C_p - dt (4/h^2) V_p^0 J_p sigma_p,
  3. grid momentum update: velocity = momentum / mass, gravity increment,
     no-slip contact (the full nodal velocity is zeroed where it points
     into an obstacle, v . n < 0),
  4. grid-to-particle transfer: velocity gather, affine-velocity recovery
     C_p = (4/h^2) sum_i w_i v_i (x_i - x_p)^T, advection, and the
     multiplicative update F <- (I + dt C) F,
  5. Maxwell-history advance of the hereditary deviatoric stress.

The (4/h^2) factor is the inverse inertia tensor of the quadratic B-spline;
it makes the force transfer and the affine-velocity recovery share one set
of weights. The spatial dimension (2 or 3) is a parameter; 2D runs are
plane strain, with deformation gradients stored as 3x3 matrices whose
out-of-plane row/column stays (0, 0, 1). Fluid particles keep only their
volume ratio: after each step their deformation gradient is replaced by the
isotropic matrix with the same determinant, which prevents unbounded shear
distortion of the chamber air while preserving the pressure response.

The engine compiles the step with JAX on float64 and runs it under
``lax.scan`` in fixed-length segments. All transfers use fixed-order
scatter adds, so repeated runs are bitwise identical, which the adjoint
relies on when it replays forward segments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import constitutive as cst
from .errors import (
    ConfigurationError,
    InversionError,
    NumericsError,
    ParticleOutOfDomainError,
)

PHASE_DESIGN = 0
PHASE_WALL = 1
PHASE_FLUID = 2

DEFAULT_CFL_SAFETY = 0.5


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class ParticleSet:
    """Per-particle kinematic and material state.

    ``deformation_gradient`` is always (n, 3, 3); ``visco_history`` holds one
    trace-free tensor per active Maxwell element, shape (n, k, 3, 3).
    ``design_index`` is -1 for particles outside the design domain.
    """

    position: np.ndarray
    velocity: np.ndarray
    affine_velocity: np.ndarray
    deformation_gradient: np.ndarray
    initial_volume: np.ndarray
    mass: np.ndarray
    phase: np.ndarray
    design_index: np.ndarray
    visco_history: np.ndarray

    @property
    def n(self) -> int:
        return self.position.shape[0]

    @property
    def dim(self) -> int:
        return self.position.shape[1]

    def validate(self):
        det = cst.det3(self.deformation_gradient)
        if np.any(np.asarray(det) <= 0):
            raise InversionError(int(np.argmax(np.asarray(det) <= 0)))
        if np.any(self.mass <= 0):
            raise ConfigurationError("particle masses must be positive")
        non_design = self.phase != PHASE_DESIGN
        if np.any(self.design_index[non_design] >= 0):
            raise ConfigurationError("only design particles may carry a design index")
        if self.visco_history.size:
            tr = np.trace(self.visco_history, axis1=-2, axis2=-1)
            norm = np.linalg.norm(self.visco_history, axis=(-2, -1))
            if np.any(np.abs(tr) > 1e-10 * np.maximum(norm, 1e-300)):
                raise ConfigurationError("visco_history tensors must be trace-free")

    def copy(self) -> "ParticleSet":
        return ParticleSet(*(np.array(getattr(self, f)) for f in (
            "position", "velocity", "affine_velocity", "deformation_gradient",
            "initial_volume", "mass", "phase", "design_index", "visco_history")))


def make_particles(positions, volume, density, phase=None, design_index=None,
                   n_maxwell=0, velocity=None) -> ParticleSet:
    """Assemble a ParticleSet at rest with identity deformation."""
    positions = np.asarray(positions, dtype=float)
    n, d = positions.shape
    vol = np.full(n, volume, dtype=float) if np.ndim(volume) == 0 else np.asarray(volume)
    dens = np.full(n, density, dtype=float) if np.ndim(density) == 0 else np.asarray(density)
    return ParticleSet(
        position=positions,
        velocity=np.zeros((n, d)) if velocity is None else np.asarray(velocity, dtype=float),
        affine_velocity=np.zeros((n, d, d)),
        deformation_gradient=np.tile(np.eye(3), (n, 1, 1)),
        initial_volume=vol,
        mass=dens * vol,
        phase=np.full(n, PHASE_DESIGN, dtype=np.int8) if phase is None
        else np.asarray(phase, dtype=np.int8),
        design_index=np.arange(n, dtype=np.int32) if design_index is None
        else np.asarray(design_index, dtype=np.int32),
        visco_history=np.zeros((n, n_maxwell, 3, 3)),
    )


@dataclass
class GridField:
    """Background grid state: nodal mass and momentum (flattened C-order)."""

    resolution: tuple
    spacing: float
    mass: np.ndarray
    momentum: np.ndarray
    velocity: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.resolution))

    @classmethod
    def empty(cls, resolution, spacing) -> "GridField":
        resolution = tuple(int(r) for r in resolution)
        n = int(np.prod(resolution))
        return cls(resolution, float(spacing),
                   np.zeros(n), np.zeros((n, len(resolution))))

    def node_positions(self) -> np.ndarray:
        axes = [np.arange(r) * self.spacing for r in self.resolution]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class BoundarySet:
    """No-slip planes given by a point and the outward (into-domain) normal."""

    planes: list

    def __post_init__(self):
        cleaned = []
        for point, normal in self.planes:
            normal = np.asarray(normal, dtype=float)
            if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
                raise ConfigurationError("boundary normals must be unit vectors")
            cleaned.append((np.asarray(point, dtype=float), normal))
        self.planes = cleaned

    @classmethod
    def none(cls) -> "BoundarySet":
        return cls([])


@dataclass
class SimClock:
    """Time discretization; actuation and the objective window start at t_start."""

    dt: float
    t_start: float
    t_end: float
    step: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.t_start > self.t_end:
            raise ConfigurationError("t_start must not exceed t_end")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def start_step(self) -> int:
        return int(round(self.t_start / self.dt))


# ---------------------------------------------------------------------------
# transfer math (array-level, traceable, dimension-generic)
# ---------------------------------------------------------------------------

def _offsets(dim: int) -> np.ndarray:
    grids = np.meshgrid(*([np.arange(3)] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int32)


def _strides(resolution) -> np.ndarray:
    return np.array(
        [int(np.prod(resolution[i + 1:])) for i in range(len(resolution))],
        dtype=np.int32,
    )


def bspline_weights(fx):
    """Quadratic B-spline weights per axis for fx = x/h - base, shape (..., 3, d)."""
    return jnp.stack(
        [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2],
        axis=-2,
    )


def transfer_geometry(x, h, offsets, strides):
    """Stencil data shared by both transfer directions.

    Returns ``(base, wij, flat, dpos)``: integer cell base per particle, the
    3^d products of axis weights, flattened node indices, and node-particle
    offsets in meters.
    """
    xh = x / h
    base = jnp.floor(xh - 0.5).astype(jnp.int32)
    fx = xh - base
    w = bspline_weights(fx)
    d = x.shape[1]
    wij = w[:, offsets[:, 0], 0]
    for axis in range(1, d):
        wij = wij * w[:, offsets[:, axis], axis]
    nodes = base[:, None, :] + offsets[None, :, :]
    flat = (nodes * strides).sum(axis=-1)
    dpos = (nodes - xh[:, None, :]) * h
    return base, wij, flat, dpos


def p2g_scatter(wij, flat, dpos, velocity, affine, stress, mass, vol_j, h, dt, n_nodes):
    """Scatter mass and momentum to the grid (single fixed-order reduction).

    ``stress`` is the d x d Cauchy stress; ``vol_j`` the current particle
    volume V0 * J entering the MLS force term.
    """
    d = velocity.shape[1]
    a = mass[:, None, None] * affine - dt * (4.0 / h**2) * vol_j[:, None, None] * stress
    mom = wij[..., None] * (mass[:, None, None] * velocity[:, None, :]
                            + jnp.einsum("nij,nkj->nki", a, dpos))
    src = jnp.concatenate(
        [mom, jnp.broadcast_to((wij * mass[:, None])[..., None], wij.shape + (1,))],
        axis=-1,
    )
    out = jnp.zeros((n_nodes, d + 1)).at[flat.reshape(-1)].add(src.reshape(-1, d + 1))
    return out[:, d], out[:, :d]


def grid_velocity(grid_mass, grid_momentum):
    """Nodal velocity; zero-mass nodes stay at rest."""
    return jnp.where(grid_mass[:, None] > 0,
                     grid_momentum / jnp.maximum(grid_mass, 1e-300)[:, None], 0.0)


def apply_no_slip(gv, grid_mass, plane_masks, plane_normals):
    """Zero the full nodal velocity where it points into an obstacle.

    Returns the clamped field and the number of activations on nodes that
    carry mass (the contact-diagnostic the adjoint reports).
    """
    count = jnp.zeros((), dtype=jnp.int32)
    for mask, normal in zip(plane_masks, plane_normals):
        inward = (gv * normal).sum(axis=1) < 0.0
        clamp = mask & inward
        count = count + jnp.sum(clamp & (grid_mass > 0), dtype=jnp.int32)
        gv = jnp.where(clamp[:, None], 0.0, gv)
    return gv, count


def g2p_gather(gv, wij, flat, dpos, h):
    """Gather velocity and recover the affine velocity matrix."""
    vi = gv[flat]
    wvi = wij[..., None] * vi
    v_new = wvi.sum(axis=1)
    c_new = (4.0 / h**2) * jnp.swapaxes(wvi, 1, 2) @ dpos
    return v_new, c_new


def _embed3(c, dim):
    if dim == 3:
        return c
    return jnp.zeros(c.shape[:-2] + (3, 3)).at[..., :2, :2].set(c)


# ---------------------------------------------------------------------------
# standalone transfer operations (validated, numpy in / numpy out)
# ---------------------------------------------------------------------------

def _out_of_margin(position, spacing, resolution):
    """One-cell margin violation flags; also covers the full stencil reach."""
    xh = position / spacing
    hi = jnp.asarray(np.asarray(resolution, dtype=float) - 2.0)
    return jnp.any((xh < 1.0) | (xh > hi), axis=1)


def _check_in_domain(position, spacing, resolution, step=None):
    bad = np.asarray(_out_of_margin(jnp.asarray(position), spacing, resolution))
    if np.any(bad):
        raise ParticleOutOfDomainError(int(np.argmax(bad)), step=step)


def particle_to_grid(particles: ParticleSet, stresses, grid: GridField, dt: float) -> GridField:
    """Transfer particle mass and momentum to the grid.

    ``stresses`` holds one d x d Cauchy tensor per particle. Fails if any
    particle sits within one cell of the grid edge or any stress is
    non-finite.
    """
    stresses = np.asarray(stresses, dtype=float)
    if not np.all(np.isfinite(stresses)):
        raise NumericsError("non-finite particle stress")
    offsets = _offsets(particles.dim)
    strides = _strides(grid.resolution)
    _check_in_domain(particles.position, grid.spacing, grid.resolution)
    _, wij, flat, dpos = transfer_geometry(
        jnp.asarray(particles.position), grid.spacing, offsets, strides)
    vol_j = particles.initial_volume * np.asarray(cst.det3(particles.deformation_gradient))
    gm, gp = p2g_scatter(
        wij, flat, dpos, jnp.asarray(particles.velocity),
        jnp.asarray(particles.affine_velocity), jnp.asarray(stresses),
        jnp.asarray(particles.mass), jnp.asarray(vol_j),
        grid.spacing, dt, grid.n_nodes)
    return GridField(grid.resolution, grid.spacing, np.asarray(gm), np.asarray(gp))


def grid_update(grid: GridField, gravity, boundaries: BoundarySet, dt: float) -> GridField:
    """Momentum to velocity, gravity increment, then the no-slip clamp."""
    gv = grid_velocity(jnp.asarray(grid.mass), jnp.asarray(grid.momentum))
    gv = gv + jnp.asarray(gravity, dtype=float) * dt
    nodes = grid.node_positions()
    masks, normals = [], []
    for point, normal in boundaries.planes:
        masks.append(jnp.asarray((nodes - point) @ normal <= 1e-9 * grid.spacing))
        normals.append(jnp.asarray(normal))
    gv, _ = apply_no_slip(gv, jnp.asarray(grid.mass), masks, normals)
    gv = np.asarray(gv)
    return GridField(grid.resolution, grid.spacing, grid.mass.copy(),
                     gv * grid.mass[:, None], velocity=gv)


def grid_to_particle(grid: GridField, particles: ParticleSet, dt: float,
                     step: Optional[int] = None) -> ParticleSet:
    """Gather velocities, advect particles, and update deformation gradients.

    Fluid particles keep only their volume ratio (isotropic reset of F).
    Raises :class:`InversionError` if any determinant drops to zero.
    """
    if grid.velocity is None:
        raise ConfigurationError("grid velocities undefined; run grid_update first")
    offsets = _offsets(particles.dim)
    strides = _strides(grid.resolution)
    _, wij, flat, dpos = transfer_geometry(
        jnp.asarray(particles.position), grid.spacing, offsets, strides)
    v_new, c_new = g2p_gather(jnp.asarray(grid.velocity), wij, flat, dpos, grid.spacing)
    f_new = advance_deformation(
        jnp.asarray(particles.deformation_gradient), c_new,
        jnp.asarray(particles.phase == PHASE_FLUID), dt, particles.dim)
    det = np.asarray(cst.det3(f_new))
    bad = ~(det > 0)
    if np.any(bad):
        raise InversionError(int(np.argmax(bad)), step=step)
    out = particles.copy()
    out.velocity = np.asarray(v_new)
    out.affine_velocity = np.asarray(c_new)
    out.position = particles.position + dt * np.asarray(v_new)
    out.deformation_gradient = np.asarray(f_new)
    return out


def advance_deformation(f, affine, fluid_mask, dt, dim):
    """F <- (I + dt C) F, with fluid particles reset to isotropic stretch."""
    c3 = _embed3(affine, dim)
    f_new = f + dt * (c3 @ f)
    j = cst.det3(f_new)
    j_safe = jnp.maximum(j, 1e-300)
    if dim == 2:
        s = jnp.sqrt(j_safe)
        iso = (s[..., None, None] * np.diag([1.0, 1.0, 0.0])
               + np.diag([0.0, 0.0, 1.0]))
    else:
        iso = j_safe[..., None, None] ** (1.0 / 3.0) * np.eye(3)
    return jnp.where(fluid_mask[..., None, None], iso, f_new)


# ---------------------------------------------------------------------------
# CFL check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StableDtReport:
    """Per-material wave speeds and the admissible time step."""

    wave_speeds: dict
    dt_max: float
    safety: float
    dt: Optional[float] = None

    @property
    def dt_ok(self) -> Optional[bool]:
        return None if self.dt is None else self.dt <= self.dt_max


def stable_dt(solid: Optional[cst.SolidMaterial], fluid: Optional[cst.FluidMaterial],
              spacing: float, dt: Optional[float] = None,
              safety: float = DEFAULT_CFL_SAFETY) -> StableDtReport:
    """Maximum admissible time step from per-material pressure wave speeds.

    Solids use the p-wave modulus with the instantaneous shear stiffness
    (equilibrium plus all Maxwell branches); the fluid uses its bulk
    modulus. The reported bound is ``safety * spacing / max(c)``.
    """
    speeds = {}
    if solid is not None:
        k_eff = solid.bulk_modulus + 4.0 * solid.instantaneous_mu / 3.0
        if k_eff <= 0 or solid.density <= 0:
            raise ConfigurationError("solid moduli and density must be positive")
        speeds["solid"] = float(np.sqrt(k_eff / solid.density))
    if fluid is not None:
        if fluid.bulk_modulus <= 0 or fluid.density <= 0:
            raise ConfigurationError("fluid modulus and density must be positive")
        speeds["fluid"] = float(np.sqrt(fluid.bulk_modulus / fluid.density))
    if not speeds:
        raise ConfigurationError("at least one material is required")
    dt_max = safety * spacing / max(speeds.values())
    return StableDtReport(speeds, dt_max, safety, dt)


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class SimState(NamedTuple):
    """Traced per-particle state carried through the scan."""

    position: jnp.ndarray
    velocity: jnp.ndarray
    affine: jnp.ndarray
    deformation: jnp.ndarray
    history: jnp.ndarray


class StepDiagnostics(NamedTuple):
    min_det: jnp.ndarray
    argmin_det: jnp.ndarray
    out_of_domain: jnp.ndarray
    first_out: jnp.ndarray
    clamp_count: jnp.ndarray


@dataclass
class ForwardSummary:
    """Trajectory summary: objective inputs plus run diagnostics."""

    objective: float
    xg_start: np.ndarray
    xg_end: np.ndarray
    total_design_mass: float
    clamp_activations: int
    min_det: float
    n_steps: int
    wall_seconds: float
    final_state: SimState
    snapshots: list = field(default_factory=list)


class SimEngine:
    """Compiled forward simulator for one scenario geometry.

    Holds the seeded particles, grid constants, materials, actuation table
    and boundaries, and exposes segment-wise execution so the adjoint can
    checkpoint and replay deterministically. Engines are immutable after
    construction; distinct engines may run concurrently.
    """

    def __init__(self, particles: ParticleSet, resolution, spacing: float,
                 clock: SimClock, solid: cst.SolidMaterial, fluid: cst.FluidMaterial,
                 waveform: cst.ActuationWaveform, boundaries: BoundarySet,
                 gravity_direction, gravity_magnitude: float, direction,
                 check_cfl: bool = True):
        particles.validate()
        self.particles = particles
        self.dim = particles.dim
        self.resolution = tuple(int(r) for r in np.broadcast_to(resolution, (self.dim,)))
        self.spacing = float(spacing)
        self.clock = clock
        self.solid = solid
        self.fluid = fluid
        self.waveform = waveform
        self.boundaries = boundaries
        self.gravity_direction = np.asarray(gravity_direction, dtype=float)
        self.gravity_magnitude = float(gravity_magnitude)
        self.direction = np.asarray(direction, dtype=float)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ConfigurationError("objective direction must be a unit vector")

        _check_in_domain(particles.position, self.spacing, self.resolution)
        if check_cfl:
            report = stable_dt(solid, fluid, self.spacing, dt=clock.dt)
            if not report.dt_ok:
                raise ConfigurationError(
                    f"dt {clock.dt:.3g} exceeds the CFL bound {report.dt_max:.3g} "
                    f"(wave speeds {report.wave_speeds})"
                )

        self._offsets = _offsets(self.dim)
        self._strides = _strides(self.resolution)
        self._n_nodes = int(np.prod(self.resolution))
        self.design_slots = np.flatnonzero(particles.phase == PHASE_DESIGN)
        order = np.argsort(particles.design_index[self.design_slots])
        self.design_slots = self.design_slots[order]
        self.n_design = self.design_slots.size
        self._fluid_mask = jnp.asarray(particles.phase == PHASE_FLUID)
        self._v0 = jnp.asarray(particles.initial_volume)
        self._base_mass = jnp.asarray(particles.mass)
        self._base_lam = jnp.full(particles.n, solid.lam)
        self._base_mu = jnp.full(particles.n, solid.mu)
        self._design_v0 = jnp.asarray(particles.initial_volume[self.design_slots])
        self._design_slots_j = jnp.asarray(self.design_slots)
        self._g_inf = solid.prony.g_inf
        self._g_arr = jnp.asarray(solid.prony.moduli)
        self._tau_arr = jnp.asarray(solid.prony.taus)
        if solid.prony.n_elements != particles.visco_history.shape[1]:
            raise ConfigurationError("visco_history width does not match the Prony series")
        times_ext, pressures_ext = waveform.padded_table()
        self._wave_t = jnp.asarray(times_ext)
        self._wave_p = jnp.asarray(pressures_ext)

        nodes = GridField.empty(self.resolution, self.spacing).node_positions()
        self._plane_masks = [
            jnp.asarray((nodes - point) @ normal <= 1e-9 * self.spacing)
            for point, normal in boundaries.planes
        ]
        self._plane_normals = [jnp.asarray(normal) for _, normal in boundaries.planes]

        self._segment_cache = {}
        self._xg_grad = jax.jit(jax.grad(self._xg_dot_e, argnums=(0, 1)))

    # -- construction helpers ------------------------------------------------

    def initial_state(self) -> SimState:
        p = self.particles
        return SimState(
            jnp.asarray(p.position), jnp.asarray(p.velocity),
            jnp.asarray(p.affine_velocity), jnp.asarray(p.deformation_gradient),
            jnp.asarray(p.visco_history),
        )

    @property
    def state_nbytes(self) -> int:
        s = self.initial_state()
        return int(sum(np.prod(a.shape) * 8 for a in s))

    def particle_properties(self, density):
        """Per-particle (mass, lambda, mu) for a design density vector."""
        scale = cst.density_scale(jnp.asarray(density), self.solid.void_epsilon)
        mass = self._base_mass.at[self._design_slots_j].set(
            self.solid.density * scale * self._design_v0)
        lam = self._base_lam.at[self._design_slots_j].set(self.solid.lam * scale)
        mu = self._base_mu.at[self._design_slots_j].set(self.solid.mu * scale)
        return mass, lam, mu

    # -- physics of one step --------------------------------------------------

    def _stress(self, state: SimState, lam, mu, t):
        j, f_bar, sigma_h, dev_s0 = cst.elastic_stress_parts(state.deformation, lam, mu)
        sigma3 = sigma_h[..., None, None] * np.eye(3) + self._g_inf * dev_s0
        if self._g_arr.size:
            pushed = (f_bar[:, None] @ state.history
                      @ jnp.swapaxes(f_bar, -1, -2)[:, None])
            sigma3 = sigma3 + cst.deviator(
                jnp.einsum("k,nkij->nij", self._g_arr, pushed))
        sigma_solid = sigma3[:, : self.dim, : self.dim]

        p_act = cst.sample_actuation_padded(
            t, self.clock.t_start, self.waveform.period, self._wave_t, self._wave_p)
        pressure = cst.fluid_pressure(j, self.fluid, p_act)
        grad_u = state.affine
        div_u = jnp.trace(grad_u, axis1=-2, axis2=-1)
        eye = np.eye(self.dim)
        sigma_fluid = (
            -pressure[:, None, None] * eye
            + self.fluid.shear_viscosity * (grad_u + jnp.swapaxes(grad_u, -1, -2))
            + (self.fluid.volume_viscosity - 2.0 / 3.0 * self.fluid.shear_viscosity)
            * div_u[:, None, None] * eye
        )
        sigma = jnp.where(self._fluid_mask[:, None, None], sigma_fluid, sigma_solid)
        return sigma, j, f_bar, dev_s0

    def _step_math(self, state: SimState, t_index, mass, lam, mu, gravity_vec):
        dt = self.clock.dt
        t = t_index * dt
        sigma, j, f_bar, dev_s0 = self._stress(state, lam, mu, t)

        _, wij, flat, dpos = transfer_geometry(
            state.position, self.spacing, self._offsets, self._strides)
        oob_particle = _out_of_margin(state.position, self.spacing, self.resolution)
        gm, gp = p2g_scatter(wij, flat, dpos, state.velocity, state.affine, sigma,
                             mass, self._v0 * j, self.spacing, dt, self._n_nodes)

        gv = grid_velocity(gm, gp)
        gv = gv + gravity_vec * dt
        gv, clamp_count = apply_no_slip(gv, gm, self._plane_masks, self._plane_normals)

        v_new, c_new = g2p_gather(gv, wij, flat, dpos, self.spacing)
        x_new = state.position + dt * v_new
        f_new = advance_deformation(state.deformation, c_new, self._fluid_mask,
                                    dt, self.dim)

        j2, f_bar2, _, dev_s0_2 = cst.elastic_stress_parts(f_new, lam, mu)
        history = state.history
        if self._g_arr.size:
            q_old = cst.maxwell_pullback(f_bar, dev_s0)
            q_new = cst.maxwell_pullback(f_bar2, dev_s0_2)
            decay = jnp.exp(-dt / self._tau_arr)
            gain = (1.0 - decay) * self._tau_arr / dt
            history = (decay[None, :, None, None] * history
                       + gain[None, :, None, None] * (q_new - q_old)[:, None])

        j_diag = jnp.where(jnp.isfinite(j2), j2, -jnp.inf)
        diag = StepDiagnostics(
            min_det=jnp.min(j_diag),
            argmin_det=jnp.argmin(j_diag),
            out_of_domain=jnp.any(oob_particle),
            first_out=jnp.argmax(oob_particle),
            clamp_count=clamp_count,
        )
        return SimState(x_new, v_new, c_new, f_new, history), diag

    # -- compiled segment execution -------------------------------------------

    def _segment_fns(self, length: int):
        if length not in self._segment_cache:
            def seg_diag(state, density, g_mag, t0):
                mass, lam, mu = self.particle_properties(density)
                g_vec = jnp.asarray(self.gravity_direction) * g_mag

                def body(st, i):
                    return self._step_math(st, t0 + i, mass, lam, mu, g_vec)

                return jax.lax.scan(body, state, jnp.arange(length))

            def seg_plain(state, density, g_mag, t0):
                mass, lam, mu = self.particle_properties(density)
                g_vec = jnp.asarray(self.gravity_direction) * g_mag

                def body(st, i):
                    new, _ = self._step_math(st, t0 + i, mass, lam, mu, g_vec)
                    return new, None

                out, _ = jax.lax.scan(jax.checkpoint(body), state, jnp.arange(length))
                return out

            def seg_vjp(state, density, g_mag, t0, ct_state):
                primal, pullback = jax.vjp(
                    lambda s, rho: seg_plain(s, rho, g_mag, t0), state, density)
                ct_in, ct_density = pullback(ct_state)
                return primal, ct_in, ct_density

            self._segment_cache[length] = (
                jax.jit(seg_diag), jax.jit(seg_plain), jax.jit(seg_vjp))
        return self._segment_cache[length]

    def run_segment(self, state: SimState, density, gravity_scale: float,
                    t0: int, length: int):
        """Advance ``length`` steps; returns the new state and raises on failure."""
        seg_diag, _, _ = self._segment_fns(length)
        g_mag = self.gravity_magnitude * gravity_scale
        new_state, diag = seg_diag(state, jnp.asarray(density), g_mag, t0)
        self._raise_on_diag(diag, t0)
        return new_state, diag

    def _raise_on_diag(self, diag: StepDiagnostics, t0: int):
        oob = np.asarray(diag.out_of_domain)
        if oob.any():
            step = int(np.argmax(oob))
            raise ParticleOutOfDomainError(
                int(np.asarray(diag.first_out)[step]), step=t0 + step)
        min_det = np.asarray(diag.min_det)
        bad = min_det <= 0
        if bad.any():
            step = int(np.argmax(bad))
            raise InversionError(
                int(np.asarray(diag.argmin_det)[step]), step=t0 + step)

    def segment_vjp(self, state: SimState, density, gravity_scale: float,
                    t0: int, length: int, ct_state):
        """Replay one segment and pull the state cotangent back across it."""
        _, _, seg_vjp = self._segment_fns(length)
        g_mag = self.gravity_magnitude * gravity_scale
        return seg_vjp(state, jnp.asarray(density), g_mag, t0, ct_state)

    # -- objective readout -----------------------------------------------------

    def _xg_dot_e(self, x, density):
        scale = cst.density_scale(density, self.solid.void_epsilon)
        masses = self.solid.density * scale * self._design_v0
        xg = (x[self._design_slots_j] * masses[:, None]).sum(axis=0) / masses.sum()
        return xg @ jnp.asarray(self.direction)

    def center_of_gravity(self, state: SimState, density) -> np.ndarray:
        x = np.asarray(state.position)[self.design_slots]
        masses = self.design_masses(density)
        return x.T @ masses / masses.sum()

    def design_masses(self, density) -> np.ndarray:
        """Interpolated per-particle masses over the design domain."""
        scale = cst.density_scale(np.asarray(density), self.solid.void_epsilon)
        return self.solid.density * scale * np.asarray(self._design_v0)

    def xg_cotangents(self, state: SimState, density):
        """Gradients of xg . e w.r.t. particle positions and the density."""
        ct_x, ct_density = self._xg_grad(state.position, jnp.asarray(density))
        ct_state = SimState(
            ct_x, jnp.zeros_like(state.velocity), jnp.zeros_like(state.affine),
            jnp.zeros_like(state.deformation), jnp.zeros_like(state.history))
        return ct_state, ct_density

    # -- forward run -----------------------------------------------------------

    def run_forward(self, density, gravity_scale: float = 1.0,
                    snapshot_every: Optional[int] = None,
                    boundaries: Optional[np.ndarray] = None) -> ForwardSummary:
        """Simulate t in [0, t_end] and summarize the trajectory.

        ``density`` is the fictitious-density vector over design particles.
        Snapshots (positions + phase) are recorded every ``snapshot_every``
        steps when requested.
        """
        t_begin = time.perf_counter()
        density = np.asarray(density, dtype=float)
        if density.shape != (self.n_design,):
            raise ConfigurationError(
                f"density must have {self.n_design} entries, got {density.shape}")
        n_steps = self.clock.n_steps
        if boundaries is None:
            step_hint = snapshot_every or min(512, max(1, n_steps))
            boundaries = np.arange(0, n_steps, step_hint)
        bounds = np.unique(np.concatenate(
            [boundaries, [0, self.clock.start_step, n_steps]])).astype(int)
        bounds = bounds[(bounds >= 0) & (bounds <= n_steps)]

        state = self.initial_state()
        xg_start = self.center_of_gravity(state, density)  # valid when start_step == 0
        clamps = 0
        min_det = np.inf
        snapshots = []
        if snapshot_every:
            snapshots.append((0, np.asarray(state.position), self.particles.phase.copy()))
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi == lo:
                continue
            state, diag = self.run_segment(state, density, gravity_scale, int(lo),
                                           int(hi - lo))
            clamps += int(np.asarray(diag.clamp_count).sum())
            min_det = min(min_det, float(np.asarray(diag.min_det).min()))
            if hi == self.clock.start_step:
                xg_start = self.center_of_gravity(state, density)
            if snapshot_every and hi % snapshot_every == 0 and hi < n_steps:
                snapshots.append((int(hi), np.asarray(state.position),
                                  self.particles.phase.copy()))
        xg_end = self.center_of_gravity(state, density)
        if snapshot_every:
            snapshots.append((n_steps, np.asarray(state.position),
                              self.particles.phase.copy()))
        total_mass = float(self.design_masses(density).sum())
        objective = float((xg_end - xg_start) @ self.direction)
        return ForwardSummary(
            objective=objective, xg_start=xg_start, xg_end=xg_end,
            total_design_mass=total_mass, clamp_activations=clamps,
            min_det=min_det if n_steps else float("nan"),
            n_steps=n_steps, wall_seconds=time.perf_counter() - t_begin,
            final_state=state, snapshots=snapshots)

    def step_once(self, state: SimState, t_index: int, density,
                  gravity_scale: float = 1.0):
        """Single step, for tests and composition checks."""
        return self.run_segment(state, density, gravity_scale, t_index, 1)

    def transfer_to_grid(self, state: SimState, density, t_index: int) -> GridField:
        """Diagnostic particle-to-grid transfer of the given state."""
        mass, lam, mu = self.particle_properties(jnp.asarray(density))
        sigma, j, _, _ = self._stress(state, lam, mu, t_index * self.clock.dt)
        _, wij, flat, dpos = transfer_geometry(
            state.position, self.spacing, self._offsets, self._strides)
        gm, gp = p2g_scatter(wij, flat, dpos, state.velocity, state.affine, sigma,
                             mass, self._v0 * j, self.spacing, self.clock.dt,
                             self._n_nodes)
        return GridField(self.resolution, self.spacing, np.asarray(gm),
                         np.asarray(gp))

    def total_momentum(self, state: SimState, density) -> np.ndarray:
        mass, _, _ = self.particle_properties(jnp.asarray(density))
        return np.asarray((np.asarray(mass)[:, None]
                           * np.asarray(state.velocity)).sum(axis=0))


def run_forward(engine: SimEngine, density, **kwargs) -> ForwardSummary:
    """Module-level alias of :meth:`SimEngine.run_forward`."""
    return engine.run_forward(density, **kwargs)
