import numpy as np
import pytest

from stmopt.fem import StressField, model_for
from stmopt.model import (Load, NodeSelector, ProblemDefinition, Support, build_mesh,
                          init_density)
from stmopt.optimizer import (FREE, LOWER, UPPER, ActiveConstraintSet,
                              ConstraintDroppedWarning, detect_inelastic_domains,
                              hestenes_multipliers, is_finite_history, project_gradient,
                              restore_constraints, run_optimization, update_step)
from stmopt.sensitivity import dissipation_rate, gradient_bundle


def beam(n=10, **kw):
    kw.setdefault("mass_fraction", 0.3)
    kw.setdefault("tensile_strength_factor", 0.5)
    return ProblemDefinition(
        nx=n, ny=n, element_size=1.0 / n,
        loads=(Load(NodeSelector(box=(0.4, 0.0, 0.6, 0.0)), 0.0, 1.0, "total"),),
        supports=(Support(NodeSelector(edge="top"), True, True),),
        **kw)


def grid_mesh(nx, ny):
    return build_mesh(ProblemDefinition(
        nx=nx, ny=ny, loads=(Load(NodeSelector(edge="top"), 0.0, 1.0),),
        supports=(Support(NodeSelector(edge="bottom"), True, True),),
        mass_fraction=0.5, tensile_strength=1.0))


def stress_with_sigma1(values):
    """StressField whose four Gauss points all carry the given sigma1 (uniaxial)."""
    s1 = np.repeat(np.asarray(values, dtype=float)[:, None], 4, axis=1)
    comps = np.zeros(s1.shape + (3,))
    comps[..., 0] = s1
    return StressField(components=comps, sigma1=s1)


# -- projection ---------------------------------------------------------------------

def test_mass_only_projection_example():
    res = project_gradient(np.array([1.0, 2.0, 3.0]), np.ones((1, 3)))
    assert res.multipliers == pytest.approx([2.0], abs=1e-15)
    assert res.direction == pytest.approx([1.0, 0.0, -1.0], abs=1e-15)


def test_two_constraint_projection_example():
    rows = np.array([[1.0, 1, 1, 1], [1.0, 0, 0, 0]])
    res = project_gradient(np.array([4.0, 3, 2, 1]), rows)
    assert res.multipliers == pytest.approx([2.0, 2.0], abs=1e-14)
    assert res.direction == pytest.approx([0.0, -1.0, 0.0, 1.0], abs=1e-14)
    assert hestenes_multipliers(np.array([4.0, 3, 2, 1]), rows) == pytest.approx([2.0, 2.0])


def test_mean_value_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = rng.normal(size=50) * 10.0 ** rng.integers(-3, 4)
        lam = project_gradient(g, np.ones((1, 50))).multipliers[0]
        assert abs(lam - g.mean()) <= 1e-12 * np.abs(g).max()
        assert abs(hestenes_multipliers(g, np.ones((1, 50)))[0] - g.mean()) <= 1e-12 * np.abs(g).max()


def test_projection_is_idempotent_and_orthogonal():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(3, 40))
    bounds = np.zeros(40, dtype=np.int8)
    bounds[[3, 7]] = LOWER
    bounds[11] = UPPER
    g = rng.normal(size=40)
    d = project_gradient(g, rows, bounds).direction
    again = project_gradient(-d, rows, bounds).direction
    assert np.abs(again - d).max() <= 1e-12 * np.abs(d).max()
    assert np.all(d[[3, 7, 11]] == 0.0)
    for row in rows:
        assert abs(d @ row) <= 1e-9 * np.linalg.norm(d) * np.linalg.norm(row)


def test_pinned_rows_match_full_kronecker_system():
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(2, 8))
    g = rng.normal(size=8)
    bounds = np.zeros(8, dtype=np.int8)
    bounds[[1, 5]] = LOWER
    res = project_gradient(g, rows, bounds)
    full = np.vstack([rows, np.eye(8)[[1, 5]]])
    lam = hestenes_multipliers(g, full)
    assert np.allclose(res.direction, -g + full.T @ lam, atol=1e-13)
    assert np.allclose(res.multipliers, lam[:2], atol=1e-12)
    assert np.allclose(res.box_multipliers[[1, 5]], lam[2:], atol=1e-12)


def test_sign_structure_with_mass_only():
    rng = np.random.default_rng(3)
    for _ in range(50):
        g = rng.normal(size=12)
        d = project_gradient(g, np.full((1, 12), 0.25)).direction
        assert d.max() > 0 and d.min() < 0
        assert abs(d @ np.full(12, 0.25)) <= 1e-14


def test_dependent_constraint_is_dropped_with_warning():
    rows = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    with pytest.warns(ConstraintDroppedWarning) as rec:
        res = project_gradient(np.array([1.0, 2.0, 3.0]), rows, labels=["mass", "dissipation[0]"])
    assert rec[0].message.names == ["dissipation[0]"]
    assert res.direction == pytest.approx([1.0, 0.0, -1.0])
    assert res.dropped == [1]


# -- update step ----------------------------------------------------------------------

def test_interior_step():
    rho = np.array([0.4, 0.5, 0.6, 0.5])
    grad = np.array([-1.0, -2.0, 0.0, -1.0])
    active = ActiveConstraintSet.initial(4)
    new, act, proj = update_step(rho, grad, np.ones((1, 4)), 0.05, active, 1e-3)
    d = proj.direction
    assert np.allclose(new, rho + 0.05 * d / np.abs(d).max(), atol=1e-15)
    assert act.n_box == 0
    assert new.sum() == pytest.approx(rho.sum(), abs=1e-15)


def test_upper_bound_clamping_trace():
    # hand trace: d = (5/3, -1/3, -4/3) pushes element 0 past 1; after pinning,
    # the free pair moves by +-0.05 and shares the 0.001 taken by the pin
    rho = np.array([0.999, 0.5, 0.5])
    grad = np.array([-3.0, -1.0, 0.0])
    active = ActiveConstraintSet.initial(3)
    new, act, proj = update_step(rho, grad, np.ones((1, 3)), 0.05, active, 1e-3)
    assert new == pytest.approx([1.0, 0.5495, 0.4495], abs=1e-14)
    assert act.bounds.tolist() == [UPPER, FREE, FREE]
    assert act.box_constraints == [(0, "upper")]
    assert proj.direction[0] == 0.0
    assert proj.direction[1:] == pytest.approx([0.5, -0.5])
    # the next projection keeps the pin: the element still wants to grow
    nxt = project_gradient(grad, np.ones((1, 3)), act.bounds)
    assert nxt.direction[0] == 0.0
    _, act2, _ = update_step(new, grad, np.ones((1, 3)), 0.05, act, 1e-3)
    assert act2.bounds[0] == UPPER


def test_pinned_element_released_when_direction_points_inward():
    rho = np.array([1e-3, 0.5, 0.5])
    active = ActiveConstraintSet.initial(3)
    active.bounds[0] = LOWER
    grad = np.array([-5.0, 0.0, 0.0])      # element 0 now wants to grow
    new, act, _ = update_step(rho, grad, np.ones((1, 3)), 0.05, active, 1e-3)
    assert act.bounds[0] == FREE and new[0] > 1e-3
    new, act, _ = update_step(rho, grad, np.ones((1, 3)), 0.05, active, 1e-3, release=False)
    assert act.bounds[0] == LOWER and new[0] == 1e-3


def test_void_elements_are_never_released():
    active = ActiveConstraintSet.initial(3, voids=[0])
    grad = np.array([-5.0, 0.0, 0.0])
    new, act, _ = update_step(np.array([1e-3, 0.5, 0.5]), grad, np.ones((1, 3)), 0.05,
                              active, 1e-3)
    assert act.bounds[0] == LOWER and new[0] == 1e-3


def test_many_elements_hitting_bounds_keep_mass():
    rng = np.random.default_rng(4)
    rho = rng.choice([0.002, 0.5, 0.998], size=60)
    grad = rng.normal(size=60)
    v = np.full(60, 0.1)
    active = ActiveConstraintSet.initial(60)
    for _ in range(30):
        rho_new, active, _ = update_step(rho, grad, v[None], 0.2, active, 1e-3)
        assert abs(rho_new @ v - rho @ v) <= 1e-13
        assert rho_new.min() >= 1e-3 and rho_new.max() <= 1.0
        rho = rho_new
        grad = rng.normal(size=60)


def test_step_drift_is_second_order():
    pd = beam(12)
    mesh = build_mesh(pd)
    model = model_for(pd, mesh)
    rho = init_density(pd, mesh)
    sol = model.solve(rho)
    doms = detect_inelastic_domains(sol.stress, 0.5 * sol.stress.sigma1.max(), mesh)
    grads = gradient_bundle(model, sol, doms)
    active = ActiveConstraintSet.initial(mesh.n_elements, n_domains=len(doms))
    drift = []
    for gamma in (0.02, 0.01, 0.005):
        new, _, _ = update_step(rho, grads.objective, grads.constraint_rows(), gamma,
                                active, pd.rho_min)
        s = model.solve(new)
        drift.append(max(abs(dissipation_rate(mesh, s, d.elements) - d.reference_rate)
                         / d.reference_rate for d in doms))
        assert abs(new @ mesh.volumes - rho @ mesh.volumes) <= 1e-12
        assert np.abs(new - rho).max() == pytest.approx(gamma)
    assert drift[0] / drift[1] >= 3.5 and drift[1] / drift[2] >= 3.5


def test_restore_constraints_reduces_residual():
    rng = np.random.default_rng(5)
    rows = rng.uniform(0.5, 1.5, size=(2, 20))
    rho = rng.uniform(0.2, 0.8, 20)
    target = rows @ rho
    shifted = rho + 0.01 * rng.normal(size=20)
    fixed = restore_constraints(shifted, rows, rows @ shifted - target,
                                ActiveConstraintSet.initial(20), 1e-3)
    assert np.abs(rows @ fixed - target).max() <= 1e-12


# -- domain detection -----------------------------------------------------------------

def test_no_domains_above_peak_stress():
    mesh = grid_mesh(4, 4)
    stress = stress_with_sigma1(np.linspace(0, 1, 16))
    assert detect_inelastic_domains(stress, 1.5, mesh) == []


def test_singleton_domain():
    mesh = grid_mesh(4, 4)
    values = np.zeros(16)
    values[6] = 2.0
    doms = detect_inelastic_domains(stress_with_sigma1(values), 1.0, mesh)
    assert len(doms) == 1 and doms[0].elements == (6,)
    assert doms[0].reference_rate == pytest.approx(4 * 2.0 * mesh.det_j[6])


def test_two_separated_clusters():
    # 5x4 grid, clusters {0,1,5} and {8,9,13,14} split by elastic elements;
    # 17 touches 13 only at a corner and stays separate
    mesh = grid_mesh(5, 4)
    hot = [0, 1, 5, 8, 9, 13, 14, 17]
    values = np.zeros(20)
    values[hot] = 3.0
    doms = detect_inelastic_domains(stress_with_sigma1(values), 1.0, mesh)
    assert [d.elements for d in doms] == [(0, 1, 5), (8, 9, 13, 14), (17,)]
    assert [d.id for d in doms] == [0, 1, 2]


def test_any_versus_average_detection():
    mesh = grid_mesh(2, 1)
    s1 = np.array([[2.0, 0, 0, 0], [2.0, 2.0, 2.0, 0.0]])
    comps = np.zeros((2, 4, 3))
    comps[..., 0] = s1
    stress = StressField(comps, s1)
    assert len(detect_inelastic_domains(stress, 1.0, mesh, "any")[0]) == 2
    assert detect_inelastic_domains(stress, 1.0, mesh, "average")[0].elements == (1,)


def test_void_elements_never_join_a_domain():
    mesh = build_mesh(beam(4, voids=((0.0, 0.0, 0.5, 0.5),)))
    stress = stress_with_sigma1(np.full(16, 5.0))
    doms = detect_inelastic_domains(stress, 1.0, mesh)
    assert len(doms) == 1
    assert not set(doms[0].elements) & set(mesh.void_elements.tolist())


# -- full runs --------------------------------------------------------------------------

def test_run_holds_mass_and_freezes_domains():
    pd = beam(10, step=0.02, max_iterations=40)
    result = run_optimization(pd)
    assert result.domains
    assert is_finite_history(result.history)
    assert [r.iteration for r in result.history] == list(range(len(result.history)))
    assert max(r.mass_residual for r in result.history) <= 1e-9
    assert max(r.orthogonality for r in result.history) <= 1e-9
    rho = result.final.rho
    assert abs(rho @ result.mesh.volumes - result.target_mass) <= 1e-9 * result.target_mass
    assert rho.min() >= pd.rho_min and rho.max() <= 1.0
    # membership is decided once; redetecting at the end would be a different thing
    first = detect_inelastic_domains(
        model_for(pd, result.mesh).solve(init_density(pd, result.mesh)).stress,
        result.tensile_strength, result.mesh, pd.detection)
    assert [d.elements for d in first] == [d.elements for d in result.domains]
    assert len(result.history[-1].dissipation) == len(result.domains)


def test_elastic_run_is_monotone():
    pd = beam(10, tensile_strength_factor=10.0, step=0.02, max_iterations=60)
    result = run_optimization(pd)
    assert result.domains == []
    f = [r.objective for r in result.history]
    assert all(b <= a for a, b in zip(f[1:], f[2:]))
    assert f[-1] < f[0]


def test_callback_sees_every_record():
    seen = []
    pd = beam(6, max_iterations=5)
    result = run_optimization(pd, callback=lambda n, rho, rec: seen.append((n, rec.iteration)))
    assert seen == [(r.iteration, r.iteration) for r in result.history]


def test_zero_iterations():
    result = run_optimization(beam(6, max_iterations=0))
    assert result.history == [] and result.termination == "max_iterations"
    assert np.all(result.final.rho == 0.3)


def test_restoration_option_runs():
    pd = beam(10, step=0.02, max_iterations=30, restore_every=5)
    result = run_optimization(pd)
    assert max(r.mass_residual for r in result.history) <= 1e-9
