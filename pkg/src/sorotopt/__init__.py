"""Shape synthesis of locomotive pneumatic soft robots.

The package couples a differentiable MLS-MPM simulation of pneumatically
actuated visco-hyperelastic bodies with density-based topology optimization,
plus the supporting viscoelastic-parameter fitting and geometry export.
Everything runs in double precision; forward runs and gradients are
deterministic on CPU.
"""

import jax as _jax

# Double precision is mandatory for the adjoint and the conservation
# guarantees; set it before any array is created.
_jax.config.update("jax_enable_x64", True)

from . import constitutive, design, io_formats, mpm, prony, scenario  # noqa: E402
from .adjoint import GradientResult, finite_difference_check, gradient, plan_checkpoints  # noqa: E402
from .optimizer import OptimizationHistory, optimize  # noqa: E402
from .scenario import Scenario, build_engine, load_scenario  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "constitutive",
    "design",
    "io_formats",
    "mpm",
    "prony",
    "scenario",
    "GradientResult",
    "finite_difference_check",
    "gradient",
    "plan_checkpoints",
    "OptimizationHistory",
    "optimize",
    "Scenario",
    "build_engine",
    "load_scenario",
    "__version__",
]
