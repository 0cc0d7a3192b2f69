"""Finite-difference verification of the analytic design sensitivities."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fem import model_for
from .model import ProblemDefinition, build_mesh, init_density
from .optimizer import detect_inelastic_domains, resolve_tensile_strength
from .sensitivity import dissipation_gradient, mass_gradient, objective_gradient

THRESHOLDS = {"objective": 1e-5, "mass": 1e-5, "dissipation": 1e-4}
RELATIVE_STEP = 1e-5


@dataclass
class FamilyReport:
    name: str
    threshold: float
    max_error: Optional[float] = None    # None: family skipped
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.max_error is None or self.max_error <= self.threshold

    def line(self) -> str:
        if self.max_error is None:
            return f"{self.name:<12} {self.note}"
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<12} max rel error {self.max_error:.3e} "
                f"(threshold {self.threshold:.0e})  {status}")


@dataclass
class GradientReport:
    probes: list
    families: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.families)

    def text(self) -> str:
        lines = [f"probes: {len(self.probes)} elements"]
        lines += [f.line() for f in self.families]
        lines.append("all gradients PASS" if self.passed else "gradient check FAILED")
        return "\n".join(lines) + "\n"


def relative_error(analytic: np.ndarray, fd: np.ndarray, scale: float) -> np.ndarray:
    """|a - fd| / max(|a|, |fd|, 1e-8 * scale).

    The floor keeps entries whose true derivative is close to zero from
    turning round-off into a huge relative error; ``scale`` is the largest
    analytic entry of the family.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8 * scale)
    return np.abs(analytic - fd) / denom


def sigma1_difference(minus: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """sigma1(minus + delta) - sigma1(minus) without subtracting close numbers.

    The radius difference uses R+ - R- = (R+^2 - R-^2) / (R+ + R-), with the
    squared radii expanded in terms of ``delta``.
    """
    plus = minus + delta
    half_m = 0.5 * (minus[..., 0] - minus[..., 1])
    half_d = 0.5 * (delta[..., 0] - delta[..., 1])
    r_m = np.hypot(half_m, minus[..., 2])
    r_p = np.hypot(0.5 * (plus[..., 0] - plus[..., 1]), plus[..., 2])
    sq = half_d * (2 * half_m + half_d) + delta[..., 2] * (2 * minus[..., 2] + delta[..., 2])
    total = r_p + r_m
    d_radius = np.divide(sq, total, out=np.zeros_like(sq), where=total > 0)
    return 0.5 * (delta[..., 0] + delta[..., 1]) + d_radius


def _secants(model, rho, e, h, domains):
    """Central secants of compliance and of each domain dissipation in rho_e.

    Both designs are solved, but the differences are formed from the exact
    identities ``f+ - f- = -u+^T dK u-`` and ``u+ - u- = -K+^-1 dK u-``
    (``dK`` is the change of element ``e``'s stiffness), so elements that
    carry a tiny share of the energy are not lost to cancellation.
    """
    mesh, el, p = model.mesh, model.element, model.penalty
    plus, minus = rho.copy(), rho.copy()
    plus[e] += h
    minus[e] -= h
    sp, sm = model.solve(plus), model.solve(minus)
    dofs = mesh.edofs[e]
    dscale = plus[e] ** p - minus[e] ** p
    df = -dscale * sp.u[dofs] @ el.k0 @ sm.u[dofs]

    rhs = np.zeros(mesh.n_dofs)
    rhs[dofs] = dscale * el.k0 @ sm.u[dofs]
    du = sp.factor.solve(-rhs)
    dd = []
    for d in domains:
        elems = np.asarray(d.elements)
        scale_p = plus[elems] ** p
        dsig = np.einsum("e,gij,ej->egi", scale_p, el.db, du[mesh.edofs[elems]])
        dsig += np.einsum("e,gij,ej->egi", scale_p - minus[elems] ** p, el.db,
                          sm.u[mesh.edofs[elems]])
        ds1 = sigma1_difference(sm.stress.components[elems], dsig)
        dd.append(float(np.sum(ds1 * mesh.det_j[elems, None])))
    return df / (2 * h), np.array(dd) / (2 * h)


def check_gradients(pd: ProblemDefinition, probes: int = 20, seed: int = 0,
                    rho: Optional[np.ndarray] = None) -> GradientReport:
    """Compare analytic gradients with central differences at random elements.

    The check runs at the initial design (or at ``rho`` if given), with
    inelastic domains detected from the initial elastic solution exactly as
    the optimizer does.
    """
    if probes < 1:
        raise ValueError("probe count must be at least 1")
    mesh = build_mesh(pd)
    model = model_for(pd, mesh)
    rho0 = init_density(pd, mesh)
    sol0 = model.solve(rho0)
    tau0 = resolve_tensile_strength(pd, mesh, sol0.stress)
    domains = detect_inelastic_domains(sol0.stress, tau0, mesh, pd.detection)

    rho = rho0 if rho is None else np.asarray(rho, dtype=float)
    sol = sol0 if rho is rho0 else model.solve(rho)
    candidates = np.flatnonzero(mesh.design_mask)
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(candidates, size=min(probes, len(candidates)), replace=False))

    g_obj = objective_gradient(model, sol)
    g_mass = mass_gradient(mesh)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g_diss = [dissipation_gradient(model, sol, d.elements) for d in domains]

    n_d = len(domains)
    fd_obj = np.empty(len(picks))
    fd_mass = np.empty(len(picks))
    fd_diss = np.empty((n_d, len(picks)))
    for j, e in enumerate(picks):
        h = RELATIVE_STEP * rho[e]
        fd_obj[j], fd_diss[:, j] = _secants(model, rho, e, h, domains)
        # mass is linear in rho, so only element e's term changes
        fd_mass[j] = ((rho[e] + h) - (rho[e] - h)) * mesh.volumes[e] / (2 * h)

    report = GradientReport(probes=[int(e) for e in picks])
    for name, g, fd in (("objective", g_obj, fd_obj), ("mass", g_mass, fd_mass)):
        err = relative_error(g[picks], fd, np.abs(g).max())
        report.families.append(FamilyReport(name, THRESHOLDS[name], float(err.max())))
    if n_d:
        worst = max(
            float(relative_error(g[picks], fd_diss[k], np.abs(g).max()).max())
            for k, g in enumerate(g_diss))
        report.families.append(FamilyReport("dissipation", THRESHOLDS["dissipation"], worst))
    else:
        report.families.append(FamilyReport(
            "dissipation", THRESHOLDS["dissipation"], None, "no domains (skipped)"))
    return report
