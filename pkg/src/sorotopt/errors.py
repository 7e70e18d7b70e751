"""Exception hierarchy for the sorotopt package.

All package errors derive from :class:`SorotoptError` so callers can catch
them generically. Simulation aborts carry enough context (step index,
particle index) to locate the failure in a long run.
"""


class SorotoptError(Exception):
    """Base class for all sorotopt errors."""


class ConfigurationError(SorotoptError):
    """Invalid scenario file, material block, or operation parameters."""


class ScenarioParseError(ConfigurationError):
    """Scenario or data file could not be parsed.

    Carries the offending key and line number when known.
    """

    def __init__(self, message, key=None, line=None):
        if key is not None:
            message = f"{message} (key {key!r}" + (f", line {line}" if line else "") + ")"
        super().__init__(message)
        self.key = key
        self.line = line


class GeometryError(ConfigurationError):
    """Scenario geometry is inconsistent (e.g. chamber outside the body)."""


class SimulationError(SorotoptError):
    """Forward simulation failure. Carries the step index when known."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ParticleOutOfDomainError(SimulationError):
    """A particle left the one-cell safety margin of the grid."""

    def __init__(self, particle, step=None):
        super().__init__(f"particle {particle} outside the grid margin", step=step)
        self.particle = particle


class InversionError(SimulationError):
    """det(F) became non-positive for some particle."""

    def __init__(self, particle, step=None):
        super().__init__(
            f"deformation gradient of particle {particle} inverted (det <= 0)", step=step
        )
        self.particle = particle


class NumericsError(SimulationError):
    """Non-finite value encountered (stress, adjoint, or gradient)."""


class DegenerateDesignError(SorotoptError):
    """Design field carries no mass; center of gravity undefined."""


class CapacityError(SorotoptError):
    """Checkpoint memory budget too small for even one segment."""


class FitError(SorotoptError):
    """Viscoelastic curve fit is infeasible (e.g. rank-deficient system)."""


class UsageError(SorotoptError):
    """Command-line usage error (maps to exit status 2)."""
