"""Plane-stress Q4 kernel: element stiffness, SIMP assembly, solve, stresses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import Mesh

_G = 1.0 / np.sqrt(3.0)
#: 2x2 Gauss points in natural coordinates, counter-clockwise, unit weights.
GAUSS_POINTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
_NODE_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


class SingularSystemError(RuntimeError):
    """The reduced stiffness matrix cannot be factorized."""


def plane_stress_matrix(young_modulus: float, poisson_ratio: float) -> np.ndarray:
    e, nu = young_modulus, poisson_ratio
    return e / (1.0 - nu * nu) * np.array([
        [1.0, nu, 0.0],
        [nu, 1.0, 0.0],
        [0.0, 0.0, (1.0 - nu) / 2.0],
    ])


def strain_displacement(xi: float, eta: float, size: float) -> np.ndarray:
    """B (3x8) of a square element of side ``size`` at natural point (xi, eta).

    Strains are ordered (exx, eyy, gamma_xy) with engineering shear.
    """
    dn_dxi = 0.25 * _NODE_XI[:, 0] * (1.0 + eta * _NODE_XI[:, 1])
    dn_deta = 0.25 * _NODE_XI[:, 1] * (1.0 + xi * _NODE_XI[:, 0])
    dn_dx = dn_dxi * 2.0 / size
    dn_dy = dn_deta * 2.0 / size
    b = np.zeros((3, 8))
    b[0, 0::2] = dn_dx
    b[1, 1::2] = dn_dy
    b[2, 0::2] = dn_dy
    b[2, 1::2] = dn_dx
    return b


@dataclass(frozen=True)
class ElementStiffness:
    """Unpenalized element matrices shared by every element of the grid."""

    k0: np.ndarray      # (8, 8)
    d0: np.ndarray      # (3, 3)
    b: np.ndarray       # (4, 3, 8): B at each Gauss point
    det_j: float
    thickness: float

    @property
    def db(self) -> np.ndarray:
        """D0 @ B at each Gauss point, shape (4, 3, 8)."""
        return np.einsum("ij,gjk->gik", self.d0, self.b)


def element_stiffness(young_modulus: float, poisson_ratio: float,
                      size: float, thickness: float) -> ElementStiffness:
    """k0 = t * sum_gp B^T D0 B det J over the 2x2 rule."""
    d0 = plane_stress_matrix(young_modulus, poisson_ratio)
    b = np.stack([strain_displacement(xi, eta, size) for xi, eta in GAUSS_POINTS])
    det_j = size * size / 4.0
    k0 = thickness * det_j * np.einsum("gji,jk,gkl->il", b, d0, b)
    k0 = 0.5 * (k0 + k0.T)
    return ElementStiffness(k0=k0, d0=d0, b=b, det_j=det_j, thickness=thickness)


def principal_stress_max(sxx, syy, sxy):
    """Largest eigenvalue of the 2D stress tensor (Mohr circle centre + radius)."""
    sxx, syy, sxy = np.asarray(sxx), np.asarray(syy), np.asarray(sxy)
    centre = 0.5 * (sxx + syy)
    radius = np.hypot(0.5 * (sxx - syy), sxy)
    return centre + radius


@dataclass(frozen=True)
class StressField:
    """Gauss-point stresses: ``components[e, i] = (sxx, syy, sxy)``."""

    components: np.ndarray  # (n_elements, 4, 3)
    sigma1: np.ndarray      # (n_elements, 4)


def recover_stresses(element: ElementStiffness, mesh: Mesh, rho: np.ndarray,
                     u: np.ndarray, penalty: float) -> StressField:
    ue = u[mesh.edofs]
    sig = np.einsum("e,gij,ej->egi", rho ** penalty, element.db, ue)
    s1 = principal_stress_max(sig[..., 0], sig[..., 1], sig[..., 2])
    return StressField(components=sig, sigma1=s1)


def rigid_body_modes(mesh: Mesh) -> np.ndarray:
    """Columns: x-translation, y-translation, rotation about the origin."""
    r = np.zeros((mesh.n_dofs, 3))
    r[0::2, 0] = 1.0
    r[1::2, 1] = 1.0
    r[0::2, 2] = -mesh.coords[:, 1]
    r[1::2, 2] = mesh.coords[:, 0]
    return r


def check_supports(mesh: Mesh) -> None:
    """Raise if the fixed dofs leave a rigid-body mode unrestrained."""
    r = rigid_body_modes(mesh)[mesh.fixed_dofs]
    scale = max(mesh.nx, mesh.ny) * mesh.element_size
    r[:, 2] /= scale
    rank = np.linalg.matrix_rank(r, tol=1e-9) if len(r) else 0
    if rank < 3:
        raise SingularSystemError(
            f"supports leave {3 - rank} rigid-body mode(s) free "
            f"({len(mesh.fixed_dofs)} fixed dofs)")


class FEModel:
    """Assembly and solution of K(rho) u = p on a fixed mesh.

    Index arrays for the free-free block are built once; each call to
    :meth:`solve` assembles the reduced matrix, factorizes it and keeps
    the factorization for adjoint solves.
    """

    def __init__(self, mesh: Mesh, element: ElementStiffness, penalty: float):
        check_supports(mesh)
        self.mesh = mesh
        self.element = element
        self.penalty = penalty
        self.free = mesh.free_dofs
        n = mesh.n_dofs
        self._reduced = np.full(n, -1)
        self._reduced[self.free] = np.arange(len(self.free))

        rows = np.repeat(mesh.edofs, 8, axis=1)   # (n_el, 64)
        cols = np.tile(mesh.edofs, (1, 8))
        keep = (self._reduced[rows] >= 0) & (self._reduced[cols] >= 0)
        self._keep = keep
        self._rows = self._reduced[rows[keep]]
        self._cols = self._reduced[cols[keep]]
        self._k0_flat = element.k0.ravel()
        self._full_rows = rows.ravel()
        self._full_cols = cols.ravel()

    def stiffness_scale(self, rho: np.ndarray) -> np.ndarray:
        return rho ** self.penalty

    def global_stiffness(self, rho: np.ndarray) -> sp.csr_matrix:
        """Full K(rho) = sum_e rho_e^p scatter(k0), including fixed dofs."""
        vals = np.outer(self.stiffness_scale(rho), self._k0_flat).ravel()
        n = self.mesh.n_dofs
        return sp.coo_matrix((vals, (self._full_rows, self._full_cols)),
                             shape=(n, n)).tocsr()

    def reduced_stiffness(self, rho: np.ndarray) -> sp.csc_matrix:
        vals = (self.stiffness_scale(rho)[:, None] * self._k0_flat[None, :])[self._keep]
        m = len(self.free)
        return sp.coo_matrix((vals, (self._rows, self._cols)), shape=(m, m)).tocsc()

    def factorize(self, rho: np.ndarray) -> "Factorization":
        k = self.reduced_stiffness(rho)
        try:
            lu = splu(k, permc_spec="MMD_AT_PLUS_A",
                      options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SingularSystemError(f"factorization failed: {exc}") from exc
        piv = np.abs(lu.U.diagonal())
        if piv.min() <= 1e-14 * piv.max():
            raise SingularSystemError(
                f"stiffness matrix is numerically singular "
                f"(pivot ratio {piv.min() / piv.max():.2e})")
        return Factorization(k, lu, self.free, self.mesh.n_dofs)

    def solve(self, rho: np.ndarray, load: Optional[np.ndarray] = None) -> "Solution":
        rho = np.asarray(rho, dtype=float)
        load = self.mesh.load_vector if load is None else load
        fac = self.factorize(rho)
        u = fac.solve(load)
        stress = recover_stresses(self.element, self.mesh, rho, u, self.penalty)
        return Solution(rho=rho, u=u, load=load, factor=fac, stress=stress,
                        compliance=compliance(u, fac.full_matvec(u)))


class Factorization:
    """LU factors of the free-free block; solves map full-length vectors."""

    def __init__(self, k_free: sp.csc_matrix, lu, free: np.ndarray, n_dofs: int):
        self.k_free = k_free
        self.lu = lu
        self.free = free
        self.n_dofs = n_dofs

    def solve(self, rhs: np.ndarray, refine: int = 1) -> np.ndarray:
        """Solve with zero values at fixed dofs; ``rhs`` there is ignored."""
        b = np.asarray(rhs, dtype=float)[self.free]
        x = self.lu.solve(b)
        for _ in range(refine):
            r = b - self.k_free @ x
            x += self.lu.solve(r)
        out = np.zeros(self.n_dofs)
        out[self.free] = x
        return out

    def full_matvec(self, u: np.ndarray) -> np.ndarray:
        """Reduced K applied to the free part of ``u``, scattered back."""
        out = np.zeros(self.n_dofs)
        out[self.free] = self.k_free @ u[self.free]
        return out

    def residual(self, u: np.ndarray, rhs: np.ndarray) -> float:
        return float(np.linalg.norm(self.full_matvec(u)[self.free] - rhs[self.free]))


@dataclass(frozen=True, eq=False)
class Solution:
    rho: np.ndarray
    u: np.ndarray
    load: np.ndarray
    factor: Factorization
    stress: StressField
    compliance: float


def compliance(u: np.ndarray, ku: np.ndarray) -> float:
    """u^T K u, given the product K u."""
    return float(u @ ku)


def assemble_and_solve(mesh: Mesh, rho: np.ndarray, penalty: float,
                       young_modulus: float = 1.0, poisson_ratio: float = 0.2,
                       load: Optional[np.ndarray] = None) -> np.ndarray:
    """One-shot displacement solve; loads and supports come from ``mesh``."""
    el = element_stiffness(young_modulus, poisson_ratio, mesh.element_size, mesh.thickness)
    return FEModel(mesh, el, penalty).solve(rho, load).u


def model_for(pd, mesh: Mesh) -> FEModel:
    el = element_stiffness(pd.young_modulus, pd.poisson_ratio, pd.element_size, pd.thickness)
    return FEModel(mesh, el, pd.penalty)
