"""Design sensitivities of compliance, mass, bounds and domain dissipation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .fem import FEModel, Solution
from .model import Mesh

BRANCH_TOL = 1e-9


class DegeneratePrincipalStressWarning(UserWarning):
    """Gauss points with sigma1 ~ sigma2 where d(sigma1)/d(sigma) is a branch choice."""

    def __init__(self, elements):
        self.elements = sorted(set(int(e) for e in elements))
        super().__init__(
            f"near-hydrostatic Gauss points in elements {self.elements}; "
            "using the mean-stress branch")


@dataclass
class GradientBundle:
    objective: np.ndarray
    mass: np.ndarray
    dissipation: list = field(default_factory=list)

    def constraint_rows(self) -> np.ndarray:
        """Equality-constraint gradients, mass first, one row each."""
        return np.vstack([self.mass, *self.dissipation])


def objective_gradient(model: FEModel, sol: Solution) -> np.ndarray:
    """df/drho_e = -p rho_e^(p-1) u_e^T k0 u_e (adjoint of compliance is u itself)."""
    p = model.penalty
    ue = sol.u[model.mesh.edofs]
    energy = np.einsum("ei,ij,ej->e", ue, model.element.k0, ue)
    return -p * sol.rho ** (p - 1) * energy


def mass_gradient(mesh: Mesh) -> np.ndarray:
    return mesh.volumes.copy()


def box_gradient(element: int, n_elements: int) -> np.ndarray:
    g = np.zeros(n_elements)
    g[element] = 1.0
    return g


def adjoint_solve(sol: Solution, rhs: np.ndarray) -> np.ndarray:
    """Solve K psi = rhs with the factorization already held by ``sol``."""
    return sol.factor.solve(rhs)


def dissipation_rate(mesh: Mesh, sol: Solution, elements) -> float:
    """sum over domain elements and Gauss points of sigma1 * det J."""
    elements = np.asarray(elements, dtype=int)
    s1 = sol.stress.sigma1[elements]
    return float(np.sum(s1 * mesh.det_j[elements, None]))


def principal_stress_derivative(components: np.ndarray, branch_tol: float = BRANCH_TOL):
    """d(sigma1)/d(sxx, syy, sxy) for stresses of shape (..., 3).

    Returns the derivative and a boolean mask of degenerate points
    (Mohr radius below ``branch_tol`` times the largest stress magnitude),
    where the derivative of the mean stress ``(1/2, 1/2, 0)`` is used.
    """
    sxx, syy, sxy = components[..., 0], components[..., 1], components[..., 2]
    half = 0.5 * (sxx - syy)
    radius = np.hypot(half, sxy)
    scale = np.abs(components).max() if components.size else 0.0
    degenerate = radius <= branch_tol * scale
    safe = np.where(degenerate, 1.0, radius)
    g = np.empty(components.shape)
    g[..., 0] = 0.5 + 0.5 * half / safe
    g[..., 1] = 0.5 - 0.5 * half / safe
    g[..., 2] = sxy / safe
    g[degenerate] = (0.5, 0.5, 0.0)
    return g, degenerate


def dissipation_gradient(model: FEModel, sol: Solution, elements,
                         branch_tol: float = BRANCH_TOL) -> np.ndarray:
    """Gradient of a domain's dissipation rate w.r.t. all element densities.

    The explicit term (SIMP factor of the domain's own stresses) is added
    on domain elements; the implicit term through the displacements is
    folded into one adjoint solve with the right-hand side
    ``dD/du = sum rho_e^p (D0 B_i)^T dsigma1/dsigma det J``.
    """
    mesh, el, p = model.mesh, model.element, model.penalty
    elements = np.asarray(elements, dtype=int)
    rho = sol.rho
    sig = sol.stress.components[elements]          # (m, 4, 3)
    g, degenerate = principal_stress_derivative(sig, branch_tol)
    if degenerate.any():
        warnings.warn(DegeneratePrincipalStressWarning(elements[degenerate.any(axis=1)]),
                      stacklevel=2)

    det_j = mesh.det_j[elements]
    db = el.db                                       # (4, 3, 8)
    ue = sol.u[mesh.edofs[elements]]                 # (m, 8)
    unpenalized = np.einsum("gij,ej->egi", db, ue)   # D0 B u_e
    explicit = p * rho[elements] ** (p - 1) * det_j * np.einsum("egi,egi->e", g, unpenalized)

    c_local = (rho[elements] ** p * det_j)[:, None] * np.einsum("gij,egi->ej", db, g)
    rhs = np.zeros(mesh.n_dofs)
    np.add.at(rhs, mesh.edofs[elements], c_local)
    psi = adjoint_solve(sol, rhs)

    psi_e = psi[mesh.edofs]
    u_all = sol.u[mesh.edofs]
    grad = -p * rho ** (p - 1) * np.einsum("ei,ij,ej->e", psi_e, el.k0, u_all)
    np.add.at(grad, elements, explicit)
    return grad


def gradient_bundle(model: FEModel, sol: Solution, domains) -> GradientBundle:
    return GradientBundle(
        objective=objective_gradient(model, sol),
        mass=mass_gradient(model.mesh),
        dissipation=[dissipation_gradient(model, sol, d.elements) for d in domains],
    )
