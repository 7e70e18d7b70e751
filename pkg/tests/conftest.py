"""Shared fixtures and the acceptance-summary reporting hook."""

import numpy as np
import pytest

from sorotopt.prony import PronySeries

# DMA-fitted relative moduli of the printed soft elastomer (master curve at
# 21.8 C reference temperature); element order is slowest first.
ELASTOMER_G_INF = 9.06e-4
ELASTOMER_G = (6.36e-4, 2.09e-3, 1.27e-2, 1.25e-1, 8.59e-1)
ELASTOMER_TAU = (2.73e-1, 7.56e-3, 2.09e-4, 5.77e-6, 1.59e-7)


@pytest.fixture
def elastomer_series() -> PronySeries:
    return PronySeries(ELASTOMER_G_INF, np.array(ELASTOMER_G), np.array(ELASTOMER_TAU))


@pytest.fixture(scope="session")
def small_problem():
    """Shortened clamp-free scenario shared by adjoint/optimizer tests."""
    import dataclasses

    from sorotopt.scenario import build_problem, load_scenario

    scenario = load_scenario("src/sorotopt/data/gradcheck_2d.scenario")
    scenario = dataclasses.replace(
        scenario, sim=dataclasses.replace(scenario.sim, t_end_s=0.014))
    return build_problem(scenario)


def random_deformation(rng, scale=0.3):
    """Random deformation gradient with a safely positive determinant."""
    while True:
        f = np.eye(3) + scale * rng.standard_normal((3, 3))
        if np.linalg.det(f) > 0.3:
            return f


# ---------------------------------------------------------------------------
# small hand-built engines for unit tests
# ---------------------------------------------------------------------------

def block_positions(origin, size, spacing, dim):
    origin = np.broadcast_to(origin, (dim,)).astype(float)
    size = np.broadcast_to(size, (dim,)).astype(float)
    counts = np.maximum(1, np.round(size / spacing).astype(int))
    axes = [origin[a] + (np.arange(counts[a]) + 0.5) * spacing for a in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def make_block_engine(dim=2, resolution=32, spacing=2e-3, block_origin=0.02,
                      block_size=0.012, dt=6e-5, t_start=0.0, t_end=None,
                      n_steps=100, gravity=9.8, boundaries=None, prony=None,
                      velocity=None, youngs=5e4, density=1000.0,
                      actuation_amplitude=0.0, direction=None):
    """Solid-only block engine with every particle a design particle."""
    from sorotopt import constitutive as cst
    from sorotopt import mpm

    positions = block_positions(block_origin, block_size, spacing / 2, dim)
    n = len(positions)
    series = prony if prony is not None else PronySeries(1.0)
    particles = mpm.make_particles(
        positions, (spacing / 2) ** dim, density, n_maxwell=series.n_elements,
        velocity=None if velocity is None
        else np.broadcast_to(velocity, (n, dim)).copy())
    solid = cst.SolidMaterial.from_youngs_poisson(youngs, 0.4, density,
                                                  prony=series)
    fluid = cst.FluidMaterial(bulk_modulus=2e3, density=100.0)
    if t_end is None:
        t_end = n_steps * dt
    clock = mpm.SimClock(dt=dt, t_start=t_start, t_end=t_end)
    if direction is None:
        direction = np.zeros(dim)
        direction[0] = 1.0
    waveform = cst.ActuationWaveform.square_wave(
        actuation_amplitude, frequency=10.0, t_start=t_start)
    gravity_dir = np.zeros(dim)
    gravity_dir[-1] = -1.0
    return mpm.SimEngine(
        particles=particles, resolution=resolution, spacing=spacing,
        clock=clock, solid=solid, fluid=fluid, waveform=waveform,
        boundaries=boundaries or mpm.BoundarySet.none(),
        gravity_direction=gravity_dir, gravity_magnitude=gravity,
        direction=direction)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion at the end of the run
# ---------------------------------------------------------------------------

_ACCEPTANCE_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("acceptance")
    if marker:
        number, title = marker.args
        _ACCEPTANCE_RESULTS[number] = (title, report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_RESULTS):
        title, outcome = _ACCEPTANCE_RESULTS[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number}: {status} - {title}")


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(number, title): acceptance criterion test")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")
