"""Scenario files: a flat, sectioned key-value format and the problem builder.

A scenario fully describes one optimization problem: grid and time
discretization, body and chamber geometry, materials, actuation, boundaries,
and the optimization hyperparameters. Keys carry their unit in the name
(``grid.spacing_m``), values are numbers, on/off switches, comma-separated
lists, or strings; ``#`` starts a comment. Unknown keys are rejected with
the offending line number so typos cannot silently fall back to defaults.

``build_problem`` turns a scenario into the runnable pieces: seeded
particles, the compiled engine, the design-field kernel, the symmetry map,
and the optimizer settings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io_formats
from .constitutive import ActuationWaveform, FluidMaterial, SolidMaterial
from .design import DesignField, FilterKernel, SymmetryMap
from .errors import ConfigurationError, GeometryError, ScenarioParseError
from .mpm import (
    PHASE_DESIGN,
    PHASE_FLUID,
    PHASE_WALL,
    BoundarySet,
    ParticleSet,
    SimClock,
    SimEngine,
    make_particles,
)
from .optimizer import AdamState, AugLagState
from .prony import PronySeries, truncate_for_dt

log = logging.getLogger(__name__)

_REQUIRED = object()


# ---------------------------------------------------------------------------
# configuration blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimBlock:
    dimension: int
    dt_s: float
    t_start_s: float
    t_end_s: float
    cfl_safety: float = 0.5


@dataclass(frozen=True)
class GridBlock:
    resolution: tuple
    spacing_m: float


@dataclass(frozen=True)
class SeedBlock:
    particles_per_cell_1d: int = 2


@dataclass(frozen=True)
class BodyBlock:
    origin_m: tuple
    size_m: tuple


@dataclass(frozen=True)
class ChamberBlock:
    size_m: tuple
    wall_thickness_m: float


@dataclass(frozen=True)
class SolidBlock:
    density_kgpm3: float
    youngs_modulus_pa: float
    poisson_ratio: float = 0.4
    void_epsilon: float = 1e-6
    prony_g_inf: float = 1.0
    prony_g: tuple = ()
    prony_tau_s: tuple = ()
    prony_truncation_factor: float = 10.0


@dataclass(frozen=True)
class FluidBlock:
    bulk_modulus_pa: float
    shear_viscosity_pas: float = 1.83e-5
    volume_viscosity_pas: float = 0.0
    density_kgpm3: float = 100.0


@dataclass(frozen=True)
class ActuationBlock:
    waveform: str = "synthetic"
    amplitude_pa: float = 0.0
    frequency_hz: float = 5.0
    rise_time_s: float = 0.01


@dataclass(frozen=True)
class GravityBlock:
    magnitude_mps2: float = 9.8
    slope_percent: float = 0.0


@dataclass(frozen=True)
class BoundaryBlock:
    ground: bool = False
    ground_height_m: float = 0.0
    walls: bool = False
    wall_gap_m: float = 0.0


@dataclass(frozen=True)
class ObjectiveBlock:
    direction: tuple = (1.0, 0.0)


@dataclass(frozen=True)
class OptBlock:
    filter_radius_m: float
    projection_beta: float = 8.0
    c_max: float = 0.0125
    learning_rate: float = 0.02
    max_iterations: int = 100
    symmetry_axes: tuple = ()
    gravity_ramp: bool = False
    penalty_initial: float = 1.0
    penalty_growth: float = 2.0
    penalty_every: int = 50
    penalty_activation: int = 50


@dataclass(frozen=True)
class Scenario:
    sim: SimBlock
    grid: GridBlock
    seed: SeedBlock
    body: BodyBlock
    chamber: ChamberBlock
    solid: SolidBlock
    fluid: FluidBlock
    actuation: ActuationBlock
    gravity: GravityBlock
    boundary: BoundaryBlock
    objective: ObjectiveBlock
    opt: OptBlock
    source_path: Optional[str] = None

    @property
    def dim(self) -> int:
        return self.sim.dimension

    @property
    def domain_size(self) -> np.ndarray:
        return np.asarray(self.grid.resolution, dtype=float) * self.grid.spacing_m

    @property
    def up_axis(self) -> int:
        return self.dim - 1


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip() != "")


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


# key -> (block, field, parser, default)
_SCHEMA = {
    "sim.dimension": ("sim", "dimension", int, _REQUIRED),
    "sim.dt_s": ("sim", "dt_s", float, _REQUIRED),
    "sim.t_start_s": ("sim", "t_start_s", float, _REQUIRED),
    "sim.t_end_s": ("sim", "t_end_s", float, _REQUIRED),
    "sim.cfl_safety": ("sim", "cfl_safety", float, 0.5),
    "grid.resolution": ("grid", "resolution", _parse_ints, _REQUIRED),
    "grid.spacing_m": ("grid", "spacing_m", float, _REQUIRED),
    "seed.particles_per_cell_1d": ("seed", "particles_per_cell_1d", int, 2),
    "body.origin_m": ("body", "origin_m", _parse_floats, _REQUIRED),
    "body.size_m": ("body", "size_m", _parse_floats, _REQUIRED),
    "chamber.size_m": ("chamber", "size_m", _parse_floats, _REQUIRED),
    "chamber.wall_thickness_m": ("chamber", "wall_thickness_m", float, _REQUIRED),
    "solid.density_kgpm3": ("solid", "density_kgpm3", float, _REQUIRED),
    "solid.youngs_modulus_pa": ("solid", "youngs_modulus_pa", float, _REQUIRED),
    "solid.poisson_ratio": ("solid", "poisson_ratio", float, 0.4),
    "solid.void_epsilon": ("solid", "void_epsilon", float, 1e-6),
    "solid.prony.g_inf": ("solid", "prony_g_inf", float, 1.0),
    "solid.prony.g": ("solid", "prony_g", _parse_floats, ()),
    "solid.prony.tau_s": ("solid", "prony_tau_s", _parse_floats, ()),
    "solid.prony.truncation_factor": ("solid", "prony_truncation_factor", float, 10.0),
    "fluid.bulk_modulus_pa": ("fluid", "bulk_modulus_pa", float, _REQUIRED),
    "fluid.shear_viscosity_pas": ("fluid", "shear_viscosity_pas", float, 1.83e-5),
    "fluid.volume_viscosity_pas": ("fluid", "volume_viscosity_pas", float, 0.0),
    "fluid.density_kgpm3": ("fluid", "density_kgpm3", float, 100.0),
    "actuation.waveform": ("actuation", "waveform", str, "synthetic"),
    "actuation.amplitude_pa": ("actuation", "amplitude_pa", float, 0.0),
    "actuation.frequency_hz": ("actuation", "frequency_hz", float, 5.0),
    "actuation.rise_time_s": ("actuation", "rise_time_s", float, 0.01),
    "gravity.magnitude_mps2": ("gravity", "magnitude_mps2", float, 9.8),
    "gravity.slope_percent": ("gravity", "slope_percent", float, 0.0),
    "boundary.ground": ("boundary", "ground", _parse_bool, False),
    "boundary.ground_height_m": ("boundary", "ground_height_m", float, 0.0),
    "boundary.walls": ("boundary", "walls", _parse_bool, False),
    "boundary.wall_gap_m": ("boundary", "wall_gap_m", float, 0.0),
    "objective.direction": ("objective", "direction", _parse_floats, (1.0, 0.0)),
    "opt.filter_radius_m": ("opt", "filter_radius_m", float, _REQUIRED),
    "opt.projection_beta": ("opt", "projection_beta", float, 8.0),
    "opt.c_max": ("opt", "c_max", float, 0.0125),
    "opt.learning_rate": ("opt", "learning_rate", float, 0.02),
    "opt.max_iterations": ("opt", "max_iterations", int, 100),
    "opt.symmetry_axes": ("opt", "symmetry_axes", _parse_ints, ()),
    "opt.gravity_ramp": ("opt", "gravity_ramp", _parse_bool, False),
    "opt.penalty_initial": ("opt", "penalty_initial", float, 1.0),
    "opt.penalty_growth": ("opt", "penalty_growth", float, 2.0),
    "opt.penalty_every": ("opt", "penalty_every", int, 50),
    "opt.penalty_activation": ("opt", "penalty_activation", int, 50),
}

_BLOCKS = {
    "sim": SimBlock, "grid": GridBlock, "seed": SeedBlock, "body": BodyBlock,
    "chamber": ChamberBlock, "solid": SolidBlock, "fluid": FluidBlock,
    "actuation": ActuationBlock, "gravity": GravityBlock,
    "boundary": BoundaryBlock, "objective": ObjectiveBlock, "opt": OptBlock,
}


def resolve_scenario_path(name) -> Path:
    """Resolve a scenario argument: a file path or a bundled scenario name."""
    path = Path(name)
    if path.exists():
        return path
    bundled = Path(__file__).parent / "data"
    for candidate in (bundled / str(name), bundled / f"{name}.scenario"):
        if candidate.exists():
            return candidate
    raise ConfigurationError(f"scenario not found: {name}")


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file.

    Every key must appear in the schema; missing required keys, type errors
    and geometric inconsistencies are reported with the key name (and line,
    where applicable). Bundled scenarios can be referenced by bare name
    (e.g. ``walker_desk2d``).
    """
    path = resolve_scenario_path(path)
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioParseError("expected 'key = value'", key=line, line=lineno)
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ScenarioParseError("unknown key", key=key, line=lineno)
        _, _, parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(text.strip())
        except (TypeError, ValueError) as exc:
            raise ScenarioParseError(str(exc), key=key, line=lineno) from None

    block_fields: dict = {name: {} for name in _BLOCKS}
    for key, (block, attr, _, default) in _SCHEMA.items():
        if key in values:
            block_fields[block][attr] = values[key]
        elif default is _REQUIRED:
            raise ScenarioParseError("missing required key", key=key)
        else:
            block_fields[block][attr] = default
    blocks = {name: cls(**block_fields[name]) for name, cls in _BLOCKS.items()}
    scenario = Scenario(**blocks, source_path=str(path))
    validate_scenario(scenario)
    return scenario


def scenario_text(scenario: Scenario) -> str:
    """Render a scenario back to its file format with all defaults resolved."""
    lines = []
    last_block = None
    for key, (block, attr, parser, _) in _SCHEMA.items():
        if block != last_block:
            if last_block is not None:
                lines.append("")
            last_block = block
        value = getattr(getattr(scenario, block), attr)
        if parser is _parse_bool:
            text = "on" if value else "off"
        elif parser in (_parse_floats, _parse_ints):
            text = ",".join(repr(v) if parser is _parse_floats else str(v)
                            for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_scenario(scenario: Scenario, path):
    Path(path).write_text(scenario_text(scenario))


def validate_scenario(scenario: Scenario):
    """Geometric and numeric consistency checks."""
    dim = scenario.sim.dimension
    if dim not in (2, 3):
        raise ConfigurationError("dimension must be 2 or 3")
    for name, tup in (("grid.resolution", scenario.grid.resolution),
                      ("body.origin_m", scenario.body.origin_m),
                      ("body.size_m", scenario.body.size_m),
                      ("chamber.size_m", scenario.chamber.size_m),
                      ("objective.direction", scenario.objective.direction)):
        if len(tup) not in (1, dim):
            raise ConfigurationError(f"{name} must have 1 or {dim} entries")
    if scenario.grid.spacing_m <= 0:
        raise ConfigurationError("grid spacing must be positive")
    if scenario.seed.particles_per_cell_1d < 1:
        raise ConfigurationError("particles_per_cell_1d must be >= 1")
    if not 0 < scenario.opt.c_max <= 0.25:
        raise ConfigurationError("c_max must lie in (0, 0.25]")
    if len(scenario.solid.prony_g) != len(scenario.solid.prony_tau_s):
        raise ConfigurationError("prony g and tau lists must have equal lengths")
    for axis in scenario.opt.symmetry_axes:
        if not 0 <= axis < dim:
            raise ConfigurationError(f"symmetry axis {axis} out of range")
    if np.linalg.norm(scenario.objective.direction) == 0:
        raise ConfigurationError("objective direction must be nonzero")

    h = scenario.grid.spacing_m
    origin = np.broadcast_to(scenario.body.origin_m, (dim,)).astype(float)
    size = np.broadcast_to(scenario.body.size_m, (dim,)).astype(float)
    air = np.broadcast_to(scenario.chamber.size_m, (dim,)).astype(float)
    wall = scenario.chamber.wall_thickness_m
    if np.any(size <= 0) or np.any(air <= 0) or wall <= 0:
        raise GeometryError("body, chamber and wall sizes must be positive")
    if np.any(air + 2 * wall >= size):
        raise GeometryError("chamber (air plus walls) must fit strictly inside the body")
    spacing = h / scenario.seed.particles_per_cell_1d
    if wall < spacing - 1e-12:
        raise GeometryError("chamber wall must be at least one particle spacing thick")
    domain = scenario.domain_size
    margin = 2 * h
    if np.any(origin < margin) or np.any(origin + size > domain - margin):
        raise GeometryError("body must sit at least two cells inside the grid")
    if scenario.boundary.walls and scenario.boundary.wall_gap_m <= 0:
        raise GeometryError("wall gap must be positive when walls are enabled")
    if scenario.actuation.waveform != "synthetic":
        wf = _waveform_path(scenario)
        if not wf.exists():
            raise ConfigurationError(f"waveform file not found: {wf}")


def _waveform_path(scenario: Scenario) -> Path:
    p = Path(scenario.actuation.waveform)
    if not p.is_absolute() and scenario.source_path:
        p = Path(scenario.source_path).parent / p
    return p


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def seed_particles(scenario: Scenario) -> ParticleSet:
    """Seed the body on a regular lattice and classify the phases.

    Particles are placed ``particles_per_cell_1d`` per axis per cell with a
    half-spacing offset, so lattice planes never coincide with region
    boundaries. The chamber air sits centered in the body, surrounded by
    the fixed chamber wall; everything else is design material.
    """
    dim = scenario.dim
    h = scenario.grid.spacing_m
    spacing = h / scenario.seed.particles_per_cell_1d
    origin = np.broadcast_to(scenario.body.origin_m, (dim,)).astype(float)
    size = np.broadcast_to(scenario.body.size_m, (dim,)).astype(float)
    counts = np.maximum(1, np.round(size / spacing).astype(int))
    axes = [origin[a] + (np.arange(counts[a]) + 0.5) * spacing for a in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    positions = np.stack([m.ravel() for m in mesh], axis=1)

    center = origin + size / 2.0
    air_half = np.broadcast_to(scenario.chamber.size_m, (dim,)).astype(float) / 2.0
    wall_half = air_half + scenario.chamber.wall_thickness_m
    rel = np.abs(positions - center)
    in_air = np.all(rel < air_half, axis=1)
    in_wall = np.all(rel < wall_half, axis=1) & ~in_air
    phase = np.full(len(positions), PHASE_DESIGN, dtype=np.int8)
    phase[in_wall] = PHASE_WALL
    phase[in_air] = PHASE_FLUID

    design_index = np.full(len(positions), -1, dtype=np.int32)
    design_slots = np.flatnonzero(phase == PHASE_DESIGN)
    design_index[design_slots] = np.arange(design_slots.size)

    density = np.where(phase == PHASE_FLUID, scenario.fluid.density_kgpm3,
                       scenario.solid.density_kgpm3)
    series = solid_prony(scenario)
    particles = make_particles(
        positions, spacing**dim, density, phase=phase, design_index=design_index,
        n_maxwell=series.n_elements)
    return particles


def solid_prony(scenario: Scenario) -> PronySeries:
    """Prony series of the scenario solid, truncated for the time step."""
    series = PronySeries(scenario.solid.prony_g_inf,
                         np.asarray(scenario.solid.prony_g),
                         np.asarray(scenario.solid.prony_tau_s))
    truncated = truncate_for_dt(series, scenario.sim.dt_s,
                                scenario.solid.prony_truncation_factor)
    removed = series.n_elements - truncated.n_elements
    if removed:
        log.info("dropped %d Maxwell element(s) too fast for dt=%.3g s",
                 removed, scenario.sim.dt_s)
    return truncated


def solid_material(scenario: Scenario) -> SolidMaterial:
    return SolidMaterial.from_youngs_poisson(
        scenario.solid.youngs_modulus_pa, scenario.solid.poisson_ratio,
        scenario.solid.density_kgpm3, prony=solid_prony(scenario),
        void_epsilon=scenario.solid.void_epsilon)


def fluid_material(scenario: Scenario) -> FluidMaterial:
    return FluidMaterial(
        bulk_modulus=scenario.fluid.bulk_modulus_pa,
        shear_viscosity=scenario.fluid.shear_viscosity_pas,
        volume_viscosity=scenario.fluid.volume_viscosity_pas,
        density=scenario.fluid.density_kgpm3)


def actuation_waveform(scenario: Scenario) -> ActuationWaveform:
    if scenario.actuation.waveform == "synthetic":
        return ActuationWaveform.square_wave(
            scenario.actuation.amplitude_pa, scenario.actuation.frequency_hz,
            t_start=scenario.sim.t_start_s, rise_time=scenario.actuation.rise_time_s)
    wf = io_formats.load_waveform(_waveform_path(scenario))
    return replace(wf, t_start=scenario.sim.t_start_s)


def boundary_set(scenario: Scenario) -> BoundarySet:
    dim = scenario.dim
    planes = []
    if scenario.boundary.ground:
        point = np.zeros(dim)
        point[scenario.up_axis] = scenario.boundary.ground_height_m
        normal = np.zeros(dim)
        normal[scenario.up_axis] = 1.0
        planes.append((point, normal))
    if scenario.boundary.walls:
        origin = np.broadcast_to(scenario.body.origin_m, (dim,)).astype(float)
        size = np.broadcast_to(scenario.body.size_m, (dim,)).astype(float)
        cx = origin[0] + size[0] / 2.0
        gap = scenario.boundary.wall_gap_m
        for side, normal_x in ((cx - gap / 2.0, 1.0), (cx + gap / 2.0, -1.0)):
            point = np.zeros(dim)
            point[0] = side
            normal = np.zeros(dim)
            normal[0] = normal_x
            planes.append((point, normal))
    return BoundarySet(planes)


def gravity_direction(scenario: Scenario) -> np.ndarray:
    """Unit gravity direction; slopes rotate gravity in the travel-up plane."""
    dim = scenario.dim
    theta = math.atan(scenario.gravity.slope_percent / 100.0)
    direction = np.zeros(dim)
    direction[scenario.up_axis] = -math.cos(theta)
    direction[0] = -math.sin(theta)
    return direction


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    """Everything needed to simulate and optimize one scenario."""

    scenario: Scenario
    engine: SimEngine
    kernel: FilterKernel
    symmetry: Optional[SymmetryMap]
    design_positions: np.ndarray

    def initial_design(self, values: Optional[np.ndarray] = None) -> DesignField:
        if values is None:
            values = np.zeros(self.engine.n_design)
        return DesignField(values, self.kernel, self.scenario.opt.projection_beta)

    def initial_auglag(self) -> AugLagState:
        opt = self.scenario.opt
        return AugLagState(
            c_max=opt.c_max, penalty=opt.penalty_initial,
            growth_factor=opt.penalty_growth, growth_every=opt.penalty_every,
            activation_iteration=opt.penalty_activation)

    def initial_adam(self) -> AdamState:
        return AdamState.zeros(self.engine.n_design,
                               learning_rate=self.scenario.opt.learning_rate)

    def density_volume(self, density: np.ndarray) -> io_formats.DensityVolume:
        """Resample the density onto the body lattice for export.

        Chamber walls count as solid (they are printed), chamber air as void.
        """
        particles = self.engine.particles
        values = np.zeros(particles.n)
        values[particles.phase == PHASE_WALL] = 1.0
        values[self.engine.design_slots] = np.asarray(density)
        dim = self.scenario.dim
        origin = np.broadcast_to(self.scenario.body.origin_m, (dim,)).astype(float)
        size = np.broadcast_to(self.scenario.body.size_m, (dim,)).astype(float)
        spacing = (self.scenario.grid.spacing_m
                   / self.scenario.seed.particles_per_cell_1d)
        return io_formats.density_volume_from_particles(
            particles.position, values, origin, size, spacing)


def build_engine(scenario: Scenario, check_cfl: bool = True) -> SimEngine:
    particles = seed_particles(scenario)
    direction = np.asarray(scenario.objective.direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    clock = SimClock(scenario.sim.dt_s, scenario.sim.t_start_s, scenario.sim.t_end_s)
    return SimEngine(
        particles=particles,
        resolution=scenario.grid.resolution,
        spacing=scenario.grid.spacing_m,
        clock=clock,
        solid=solid_material(scenario),
        fluid=fluid_material(scenario),
        waveform=actuation_waveform(scenario),
        boundaries=boundary_set(scenario),
        gravity_direction=gravity_direction(scenario),
        gravity_magnitude=scenario.gravity.magnitude_mps2,
        direction=direction,
        check_cfl=check_cfl)


def build_problem(scenario: Scenario, check_cfl: bool = True) -> Problem:
    engine = build_engine(scenario, check_cfl=check_cfl)
    design_positions = engine.particles.position[engine.design_slots]
    kernel = FilterKernel(design_positions, scenario.opt.filter_radius_m)
    symmetry = None
    if scenario.opt.symmetry_axes:
        dim = scenario.dim
        origin = np.broadcast_to(scenario.body.origin_m, (dim,)).astype(float)
        size = np.broadcast_to(scenario.body.size_m, (dim,)).astype(float)
        center = origin + size / 2.0
        spacing = scenario.grid.spacing_m / scenario.seed.particles_per_cell_1d
        planes = [(axis, center[axis]) for axis in scenario.opt.symmetry_axes]
        symmetry = SymmetryMap.from_points(design_positions, planes, spacing / 2.0)
    return Problem(scenario, engine, kernel, symmetry, design_positions)
