"""Hierarchical (leader/follower) control of the heat equation with an inverse-square potential."""

from .errors import *  # noqa: F401,F403
from .geometry import build_grid, build_regions, hardy_constant, hardy_potential
from .pde import TimeScheme, assemble, solve_backward, solve_forward, inner_q, Field
from .scenario import Scenario, load_scenario, load_bundled

__version__ = "0.1.0"

__all__ = [
    "build_grid", "build_regions", "hardy_constant", "hardy_potential",
    "TimeScheme", "assemble", "solve_backward", "solve_forward", "inner_q", "Field",
    "Scenario", "load_scenario", "load_bundled",
]
