"""Design-field pipeline: filtering, projection, objective and constraint.

Raw design variables live on the design particles with values in [-1, 1].
They are smoothed by a particle-based filter with a cubic weight profile,
then sharpened into a fictitious density in [0, 1] with a normalized
sigmoid projection. The locomotion objective and the intermediate-density
constraint are evaluated on the projected density.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DegenerateDesignError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------

class FilterKernel:
    """Normalized particle-to-particle smoothing weights.

    Weights follow the cubic profile w(r) ~ (1 - r/R)^3 for r < R and are
    normalized per particle so filtering is a convex combination. Neighbor
    lists are built once from the undeformed seeding positions (the design
    field lives on material coordinates).
    """

    profile = "cubic"

    def __init__(self, points: np.ndarray, radius: float):
        points = np.asarray(points, dtype=float)
        if radius <= 0:
            raise ConfigurationError("filter radius must be positive")
        self.radius = float(radius)
        self.n = len(points)
        tree = cKDTree(points)
        pairs = tree.query_pairs(radius, output_type="ndarray")
        if pairs.size == 0:
            log.info(
                "filter radius %.3g below the seeding spacing; filter degenerates "
                "to the identity", radius,
            )
        rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(self.n)])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(self.n)])
        dist = np.linalg.norm(points[rows] - points[cols], axis=1)
        w = (1.0 - dist / radius) ** 3
        mat = sparse.csr_array((w, (rows, cols)), shape=(self.n, self.n))
        norm = np.asarray(mat.sum(axis=1)).ravel()
        self._weights = sparse.csr_array(sparse.diags(1.0 / norm) @ mat)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self._weights @ np.asarray(values, dtype=float)

    def apply_transpose(self, values: np.ndarray) -> np.ndarray:
        """Chain-rule transpose: maps sensitivities w.r.t. filtered values back."""
        return self._weights.T @ np.asarray(values, dtype=float)

    def weights_dense(self) -> np.ndarray:
        return self._weights.toarray()


def apply_filter(values: np.ndarray, kernel: FilterKernel) -> np.ndarray:
    """Smooth raw design variables; a convex combination, so bounds survive."""
    values = np.asarray(values, dtype=float)
    if values.shape != (kernel.n,):
        raise ConfigurationError("design vector length does not match the kernel")
    if np.any(np.abs(values) > 1.0 + 1e-12):
        raise ConfigurationError("design variables must lie in [-1, 1]")
    return kernel.apply(values)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(filtered, beta: float):
    """Normalized sigmoid projection to fictitious density.

    gamma = (tanh(beta * x) / tanh(beta) + 1) / 2, mapping [-1, 1] onto
    [0, 1] with endpoints fixed and midpoint 0.5.
    """
    if beta <= 0:
        raise ConfigurationError("projection beta must be positive")
    x = np.asarray(filtered, dtype=float)
    return 0.5 * (np.tanh(beta * x) / np.tanh(beta) + 1.0)


def project_derivative(filtered, beta: float):
    """d gamma / d filtered for the chain rule through the projection."""
    x = np.asarray(filtered, dtype=float)
    return 0.5 * beta * (1.0 - np.tanh(beta * x) ** 2) / np.tanh(beta)


# ---------------------------------------------------------------------------
# design field
# ---------------------------------------------------------------------------

@dataclass
class DesignField:
    """Raw design variables plus the machinery to derive the density.

    ``filtered`` and ``density`` are recomputed from the current raw values
    on every access; nothing is cached, so the chain can never go stale.
    """

    values: np.ndarray
    kernel: FilterKernel
    beta: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.kernel.n,):
            raise ConfigurationError("design vector length does not match the kernel")
        if np.any(np.abs(self.values) > 1.0):
            raise ConfigurationError("design variables must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def filtered(self) -> np.ndarray:
        return apply_filter(self.values, self.kernel)

    @property
    def density(self) -> np.ndarray:
        return project(self.filtered, self.beta)

    def with_values(self, values: np.ndarray) -> "DesignField":
        return DesignField(values, self.kernel, self.beta)

    def chain_to_raw(self, d_density: np.ndarray) -> np.ndarray:
        """Pull a sensitivity w.r.t. density back to the raw variables."""
        d_filtered = project_derivative(self.filtered, self.beta) * d_density
        return self.kernel.apply_transpose(d_filtered)


# ---------------------------------------------------------------------------
# objective and constraint
# ---------------------------------------------------------------------------

def center_of_gravity(positions: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Mass-weighted mean position over the design domain."""
    masses = np.asarray(masses, dtype=float)
    total = masses.sum()
    if total <= 0:
        raise DegenerateDesignError("design field carries no mass")
    return np.asarray(positions, dtype=float).T @ masses / total


def objective_value(xg_start: np.ndarray, xg_end: np.ndarray, direction: np.ndarray) -> float:
    """Locomotion distance: center-of-gravity displacement along ``direction``."""
    e = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(e) - 1.0) > 1e-9:
        raise ConfigurationError("objective direction must be a unit vector")
    return float(np.dot(np.asarray(xg_end) - np.asarray(xg_start), e))


def constraint_value(density: np.ndarray) -> float:
    """Mean intermediate-density measure gamma (1 - gamma) over the design."""
    g = np.asarray(density, dtype=float)
    if np.any(g < 0) or np.any(g > 1):
        raise ConfigurationError("density must lie in [0, 1]")
    return float(np.mean(g * (1.0 - g)))


def constraint_gradient(density: np.ndarray) -> np.ndarray:
    """d constraint / d density (equal-volume particle quadrature)."""
    g = np.asarray(density, dtype=float)
    return (1.0 - 2.0 * g) / g.size


# ---------------------------------------------------------------------------
# symmetry
# ---------------------------------------------------------------------------

class SymmetryMap:
    """Mirror pairings of design particles across declared symmetry planes.

    Each plane is stored as a permutation that swaps mirror partners;
    particles on the plane map to themselves. Multiple planes are applied
    sequentially in declared order.
    """

    def __init__(self, permutations: list[np.ndarray]):
        self.permutations = [np.asarray(p, dtype=int) for p in permutations]
        for perm in self.permutations:
            if not np.array_equal(perm[perm], np.arange(perm.size)):
                raise ConfigurationError("symmetry pairing must be an involution")

    @classmethod
    def from_points(cls, points: np.ndarray, planes: list[tuple[int, float]],
                    tolerance: float) -> "SymmetryMap":
        """Build pairings by mirroring seed points across axis-aligned planes.

        ``planes`` lists ``(axis, coordinate)``; every particle must find its
        mirror image within ``tolerance`` (half the seeding spacing is a
        sound choice for lattice seedings).
        """
        points = np.asarray(points, dtype=float)
        permutations = []
        for axis, coord in planes:
            mirrored = points.copy()
            mirrored[:, axis] = 2.0 * coord - mirrored[:, axis]
            tree = cKDTree(points)
            dist, idx = tree.query(mirrored)
            if np.any(dist > tolerance):
                bad = int(np.argmax(dist))
                raise ConfigurationError(
                    f"particle {bad} has no mirror partner across axis {axis} "
                    f"(distance {dist[bad]:.3g} > tolerance {tolerance:.3g})"
                )
            perm = np.asarray(idx, dtype=int)
            if not np.array_equal(perm[perm], np.arange(perm.size)):
                raise ConfigurationError("mirror pairing is not an involution")
            permutations.append(perm)
        return cls(permutations)


def symmetrize_gradient(grad: np.ndarray, symmetry: SymmetryMap) -> np.ndarray:
    """Average a design sensitivity over mirror pairs, plane by plane."""
    out = np.asarray(grad, dtype=float).copy()
    for perm in symmetry.permutations:
        out = 0.5 * (out + out[perm])
    return out
