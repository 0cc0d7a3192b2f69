"""Inelastic-domain detection and the projected-gradient design loop.

Every iteration solves the elastic problem, builds the compliance
gradient and the gradients of the active equality constraints (mass and
one dissipation rate per inelastic domain), projects the negative
compliance gradient onto their tangent space and takes a step of
infinity-norm ``step``.  Box constraints ``rho_min <= rho <= 1`` are
handled with an active set: elements that would leave the box are pinned
to the bound and the projection is rebuilt.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .fem import FEModel, Solution, StressField, model_for
from .model import Mesh, ProblemDefinition, build_mesh, init_density, target_mass
from .sensitivity import DegeneratePrincipalStressWarning, dissipation_rate, gradient_bundle

log = logging.getLogger(__name__)

LOWER, FREE, UPPER = -1, 0, 1
MIN_STEP_SCALE = 2.0 ** -20


class ActiveSetError(RuntimeError):
    pass


class ConstraintDroppedWarning(UserWarning):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"linearly dependent constraint gradients dropped: {self.names}")


@dataclass(frozen=True)
class InelasticDomain:
    """Frozen element set sharing one dissipation-rate equality constraint."""

    id: int
    elements: tuple
    reference_rate: float

    def __len__(self):
        return len(self.elements)


def detect_inelastic_domains(stress: StressField, tensile_strength: float, mesh: Mesh,
                             mode: str = "any") -> list:
    """Group elements violating ``sigma1 <= tensile_strength`` into domains.

    With ``mode="any"`` an element is inelastic when any of its Gauss
    points violates the cut-off, with ``"average"`` when the Gauss-point
    mean does.  Violating elements are split into 4-connected components,
    numbered in ascending order of their lowest element index.  Void
    elements never join a domain.
    """
    s1 = stress.sigma1
    if mode == "any":
        flagged = (s1 > tensile_strength).any(axis=1)
    elif mode == "average":
        flagged = s1.mean(axis=1) > tensile_strength
    else:
        raise ValueError(f"unknown detection mode {mode!r}")
    if mesh.void_elements is not None:
        flagged[mesh.void_elements] = False

    labels, count = ndimage.label(mesh.element_grid(flagged))
    labels = labels.ravel()
    groups = sorted((np.flatnonzero(labels == lab) for lab in range(1, count + 1)),
                    key=lambda elems: elems[0])
    return [
        InelasticDomain(i, tuple(int(e) for e in elems),
                        float(np.sum(s1[elems] * mesh.det_j[elems, None])))
        for i, elems in enumerate(groups)
    ]


@dataclass
class ActiveConstraintSet:
    """Active constraints of one projection.

    The mass constraint and every detected dissipation domain are always
    active; ``bounds`` marks pinned elements (-1 lower, +1 upper, 0 free)
    and ``permanent`` those that may never be released (voids).
    """

    bounds: np.ndarray
    permanent: np.ndarray
    n_domains: int = 0

    @classmethod
    def initial(cls, n_elements: int, voids=(), n_domains: int = 0):
        bounds = np.zeros(n_elements, dtype=np.int8)
        permanent = np.zeros(n_elements, dtype=bool)
        bounds[np.asarray(voids, dtype=int)] = LOWER
        permanent[np.asarray(voids, dtype=int)] = True
        return cls(bounds, permanent, n_domains)

    @property
    def box_constraints(self) -> list:
        return [(int(e), "lower" if self.bounds[e] == LOWER else "upper")
                for e in np.flatnonzero(self.bounds)]

    @property
    def n_box(self) -> int:
        return int(np.count_nonzero(self.bounds))

    def __len__(self):
        return 1 + self.n_domains + self.n_box


@dataclass
class ProjectionResult:
    direction: np.ndarray
    multipliers: np.ndarray        # one per equality-constraint row
    box_multipliers: np.ndarray    # per element, zero where free
    residuals: np.ndarray          # |d . h_k| / (|d| |h_k|) per row
    dropped: list = field(default_factory=list)

    @property
    def orthogonality(self) -> float:
        return float(self.residuals.max()) if len(self.residuals) else 0.0


def hestenes_multipliers(grad_f: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """lambda = (H H^T)^-1 (H grad_f) for the constraint gradient rows H."""
    h = np.atleast_2d(rows)
    return np.linalg.solve(h @ h.T, h @ grad_f)


def _independent_rows(gram: np.ndarray, tol: float) -> list:
    """Greedy selection of rows whose Cholesky pivot exceeds ``tol * |G|``."""
    limit = tol * max(np.linalg.norm(gram, 2), np.finfo(float).tiny)
    kept = []
    for k in range(len(gram)):
        trial = kept + [k]
        sub = gram[np.ix_(trial, trial)]
        try:
            chol = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            continue
        if chol[-1, -1] ** 2 > limit:
            kept = trial
    return kept


class _TangentSpace:
    """Equality-constraint rows restricted to free elements, row-normalized."""

    def __init__(self, rows: np.ndarray, free: np.ndarray, labels=None, tol=1e-12,
                 warn=True):
        self.free = free
        hf = rows[:, free]
        norms = np.linalg.norm(hf, axis=1)
        usable = np.flatnonzero(norms > 0)
        hn = hf[usable] / norms[usable, None]
        kept = usable[_independent_rows(hn @ hn.T, tol)] if len(usable) else usable
        self.dropped = [k for k in range(len(rows)) if k not in set(kept.tolist())]
        if self.dropped and warn:
            names = [labels[k] if labels else k for k in self.dropped]
            warnings.warn(ConstraintDroppedWarning(names), stacklevel=3)
        self.kept = kept
        self.norms = norms[kept]
        self.h = hf[kept] / self.norms[:, None]
        self.gram = self.h @ self.h.T

    def project(self, v: np.ndarray):
        """Return (v - H^T mu, mu) with H (v - H^T mu) = 0, refined twice."""
        if len(self.kept) == 0:
            return v.copy(), np.zeros(0)
        mu = np.linalg.solve(self.gram, self.h @ v)
        out = v - self.h.T @ mu
        for _ in range(2):
            dmu = np.linalg.solve(self.gram, self.h @ out)
            out -= self.h.T @ dmu
            mu += dmu
        return out, mu


def project_gradient(grad_f: np.ndarray, rows, bounds: Optional[np.ndarray] = None,
                     labels=None) -> ProjectionResult:
    """Project ``-grad_f`` onto the tangent space of the active constraints.

    ``rows`` are the equality-constraint gradients; ``bounds`` marks
    elements whose box constraint is active.  Kronecker rows of pinned
    elements are eliminated exactly: the direction is zero there and the
    remaining multipliers solve the normal equations on the free entries,
    which is the same solution as the full ``[H H^T]^-1 [H grad_f]``
    system including the Kronecker rows.
    """
    grad_f = np.asarray(grad_f, dtype=float)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n = len(grad_f)
    if bounds is None:
        bounds = np.zeros(n, dtype=np.int8)
    free = bounds == FREE

    space = _TangentSpace(rows, free, labels)
    d_free, mu = space.project(-grad_f[free])
    # d = -g + H^T lambda  =>  lambda = -mu in the normalized rows
    lam = np.zeros(len(rows))
    lam[space.kept] = -mu / space.norms

    d = np.zeros(n)
    d[free] = d_free
    box = np.zeros(n)
    pinned = ~free
    box[pinned] = grad_f[pinned] - lam @ rows[:, pinned]

    dn = np.linalg.norm(d)
    hn = np.linalg.norm(rows, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        res = np.where((dn > 0) & (hn > 0), np.abs(rows @ d) / (dn * hn), 0.0)
    return ProjectionResult(d, lam, box, res, space.dropped)


def _bound_values(bounds, rho_min, rho_max):
    return np.where(bounds == LOWER, rho_min, rho_max)


def update_step(rho: np.ndarray, grad_f: np.ndarray, rows, step: float,
                active: ActiveConstraintSet, rho_min: float, rho_max: float = 1.0,
                release: bool = True, labels=None):
    """One design update with active-set handling of the density bounds.

    Returns ``(new_rho, new_active, projection)``.  The free part of the
    step is ``step * d / max|d|``.  Elements pinned during this update are
    moved exactly onto their bound and the free part receives the
    minimum-norm correction that keeps the step tangent to all equality
    constraints, so the linear mass constraint is conserved exactly.
    """
    rho = np.asarray(rho, dtype=float)
    n = len(rho)
    rows = np.atleast_2d(rows)
    bounds = active.bounds.copy()

    proj = project_gradient(grad_f, rows, bounds, labels)
    if release and bounds.any():
        inward = -proj.box_multipliers
        rel = (((bounds == LOWER) & (inward > 0)) | ((bounds == UPPER) & (inward < 0)))
        rel &= ~active.permanent
        if rel.any():
            bounds[rel] = FREE
            proj = project_gradient(grad_f, rows, bounds, labels)

    for _ in range(n + 1):
        free = bounds == FREE
        delta = np.zeros(n)
        delta[~free] = _bound_values(bounds[~free], rho_min, rho_max) - rho[~free]
        dmax = np.abs(proj.direction).max() if free.any() else 0.0
        if dmax > 0:
            delta[free] = step * proj.direction[free] / dmax
        if np.any(delta[~free]) and free.any():
            space = _TangentSpace(rows, free, warn=False)
            if len(space.kept):
                r = rows[space.kept] @ delta / space.norms
                delta[free] -= space.h.T @ np.linalg.solve(space.gram, r)
        trial = rho + delta
        low = free & (trial < rho_min)
        high = free & (trial > rho_max)
        if not (low.any() or high.any()):
            break
        bounds[low] = LOWER
        bounds[high] = UPPER
        proj = project_gradient(grad_f, rows, bounds, labels)
    else:
        raise ActiveSetError(f"active-set loop did not settle in {n + 1} passes")

    new = trial
    new[bounds == LOWER] = rho_min
    new[bounds == UPPER] = rho_max
    return new, ActiveConstraintSet(bounds, active.permanent, active.n_domains), proj


def restore_constraints(rho, rows, residuals, active: ActiveConstraintSet,
                        rho_min, rho_max=1.0):
    """First-order Newton correction of equality-constraint residuals.

    Solves ``H dx = -r`` in the minimum-norm sense on free elements and
    clips the result to the box.
    """
    free = active.bounds == FREE
    space = _TangentSpace(np.atleast_2d(rows), free, warn=False)
    if not len(space.kept):
        return rho
    r = np.asarray(residuals)[space.kept] / space.norms
    dx = -space.h.T @ np.linalg.solve(space.gram, r)
    out = rho.copy()
    out[free] = np.clip(rho[free] + dx, rho_min, rho_max)
    return out


# -- driver --------------------------------------------------------------------

@dataclass
class HistoryRecord:
    iteration: int
    objective: float
    mass_residual: float
    dissipation: tuple
    drift: tuple
    active_box: int
    d_inf: float
    orthogonality: float
    step: float


@dataclass
class OptimizationState:
    iteration: int
    rho: np.ndarray
    u: np.ndarray
    stress: StressField
    objective: float
    active: ActiveConstraintSet
    multipliers: np.ndarray
    dissipation: tuple


@dataclass
class OptimizationResult:
    problem: ProblemDefinition
    mesh: Mesh
    tensile_strength: float
    initial_max_sigma1: float
    domains: list
    history: list
    final: OptimizationState
    termination: str
    target_mass: float
    # elements whose sigma1 derivative fell back to the mean-stress branch
    degenerate_elements: tuple = ()


def resolve_tensile_strength(pd: ProblemDefinition, mesh: Mesh, stress: StressField) -> float:
    design = mesh.design_mask
    smax = float(stress.sigma1[design].max())
    if pd.tensile_strength is not None:
        return pd.tensile_strength
    return pd.tensile_strength_factor * smax


def _labels(domains):
    return ["mass"] + [f"dissipation[{d.id}]" for d in domains]


def run_optimization(pd: ProblemDefinition,
                     callback: Optional[Callable[[int, np.ndarray, HistoryRecord], None]] = None,
                     model: Optional[FEModel] = None) -> OptimizationResult:
    """Run the full design loop for ``pd``.

    ``callback(n, rho, record)`` is invoked after each recorded iteration
    with the density the record describes.  With ``pd.monotone`` a trial
    step that raises the compliance is rejected and retried with half the
    step; the reduced step is kept for the rest of the run.
    """
    mesh = model.mesh if model is not None else build_mesh(pd)
    model = model or model_for(pd, mesh)
    rho = init_density(pd, mesh)
    mass = target_mass(pd, mesh)
    v = mesh.volumes

    sol = model.solve(rho)
    tau0 = resolve_tensile_strength(pd, mesh, sol.stress)
    smax = float(sol.stress.sigma1[mesh.design_mask].max())
    domains = detect_inelastic_domains(sol.stress, tau0, mesh, pd.detection)
    log.info("tensile strength %.6g (max sigma1 %.6g): %d inelastic domain(s)",
             tau0, smax, len(domains))
    labels = _labels(domains)
    active = ActiveConstraintSet.initial(mesh.n_elements, mesh.void_elements, len(domains))

    def rates_of(s):
        return tuple(dissipation_rate(mesh, s, d.elements) for d in domains)

    degenerate = set()

    def bundle(s):
        # branch fallbacks are collected for the result instead of warning
        # on every iteration
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = gradient_bundle(model, s, domains)
        for w in caught:
            if isinstance(w.message, DegeneratePrincipalStressWarning):
                degenerate.update(w.message.elements)
            else:
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
        return out

    history = []
    termination = "max_iterations"
    proj = None
    scale = 1.0
    n = 0
    for n in range(pd.max_iterations):
        if pd.restore_every and n > 0 and n % pd.restore_every == 0:
            rows = bundle(sol).constraint_rows()
            resid = [rho @ v - mass] + [r - d.reference_rate
                                        for r, d in zip(rates_of(sol), domains)]
            rho = restore_constraints(rho, rows, resid, active, pd.rho_min)
            sol = model.solve(rho)
        grads = bundle(sol)
        rows = grads.constraint_rows()
        rates = rates_of(sol)
        gscale = float(np.abs(grads.objective).max())

        while True:
            new_rho, new_active, proj = update_step(
                rho, grads.objective, rows, pd.step * scale, active, pd.rho_min,
                release=pd.release_bounds, labels=labels)
            d_inf = float(np.abs(proj.direction).max())
            if d_inf <= pd.tol_d * gscale:
                termination = "direction_tolerance"
                new_sol = None
                break
            new_sol = model.solve(new_rho)
            if pd.monotone and new_sol.compliance > sol.compliance:
                if scale <= MIN_STEP_SCALE:
                    termination = "step_underflow"
                    new_sol = None
                    break
                scale *= 0.5
                log.debug("iteration %d: compliance rose, step scale -> %g", n, scale)
                continue
            break

        record = HistoryRecord(
            iteration=n,
            objective=sol.compliance,
            mass_residual=abs(rho @ v - mass) / mass,
            dissipation=rates,
            drift=tuple((r - d.reference_rate) / abs(d.reference_rate)
                        for r, d in zip(rates, domains)),
            active_box=new_active.n_box,
            d_inf=d_inf,
            orthogonality=proj.orthogonality,
            step=pd.step * scale,
        )
        history.append(record)
        if callback is not None:
            callback(n, rho, record)
        if new_sol is None:
            break
        if n >= 10:
            f_old = history[n - 10].objective
            if abs(record.objective - f_old) <= pd.tol_f * abs(record.objective):
                termination = "objective_stagnation"
                break
        rho, sol, active = new_rho, new_sol, new_active
    else:
        n = pd.max_iterations

    final = OptimizationState(
        iteration=n, rho=rho, u=sol.u, stress=sol.stress, objective=sol.compliance,
        active=active,
        multipliers=proj.multipliers if proj is not None else np.zeros(0),
        dissipation=rates_of(sol))
    if degenerate:
        log.info("mean-stress branch used for sigma1 derivative in %d element(s)",
                 len(degenerate))
    return OptimizationResult(pd, mesh, tau0, smax, domains, history, final,
                              termination, mass, tuple(sorted(degenerate)))


def is_finite_history(history) -> bool:
    for rec in history:
        vals = [rec.objective, rec.mass_residual, rec.d_inf, rec.orthogonality, rec.step,
                *rec.dissipation, *rec.drift]
        if not all(math.isfinite(x) for x in vals):
            return False
    return True
