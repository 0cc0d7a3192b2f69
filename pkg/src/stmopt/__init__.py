"""Topology optimization of plane-stress continua for strut-and-tie modelling.

Compliance is minimized under a mass constraint and, for every inelastic
domain found in the initial elastic solution, an equality constraint that
holds the domain's dissipation rate at its initial value.
"""

from .fem import FEModel, SingularSystemError, element_stiffness, principal_stress_max
from .model import (Load, NodeSelector, ProblemDefinition, ProblemError, Support,
                    build_mesh, init_density, load_problem, parse_problem)
from .optimizer import (detect_inelastic_domains, project_gradient, run_optimization,
                        update_step)

__version__ = "0.1.0"

__all__ = [
    "FEModel", "SingularSystemError", "element_stiffness", "principal_stress_max",
    "Load", "NodeSelector", "ProblemDefinition", "ProblemError", "Support",
    "build_mesh", "init_density", "load_problem", "parse_problem",
    "detect_inelastic_domains", "project_gradient", "run_optimization", "update_step",
]
