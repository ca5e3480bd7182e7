import numpy as np
import pytest
from hypothesis import given, strategies as st

from safe_pricing.estimator import BetaSchedule, ConfidenceEllipsoid, contains, sqrt_beta
from safe_pricing.dr_scenario import load_scenario
from safe_pricing.harness import build_problem, true_option_means
from safe_pricing.response import CallableBasis
from safe_pricing.safety import (
    ConfigurationError,
    ConstraintSet,
    PriceGrid,
    candidate_loads,
    certify_safe,
    enumerate_joint,
    initial_safe_points,
    load_margins,
    option_features,
    worst_case_load,
)
from safe_pricing.spr_policy import basis_bound, ellipsoid_bounds, run_spr

ONE = CallableBasis(lambda p: np.ones((1, 1)), 1, 1)
EXP = CallableBasis(lambda p: np.exp(-p).reshape(1, 1), 1, 1)


def scalar_ellipsoid(clip=False):
    return ConfidenceEllipsoid(np.array([2.0]), np.array([[4.0]]), 2.0, nonneg_clip=clip)


def test_scalar_worst_case_load():
    cons = ConstraintSet([[1.0]], [10.0])
    assert worst_case_load(cons, [[1.0]], [scalar_ellipsoid()], [ONE])[0, 0] == pytest.approx(3.0)


@pytest.mark.parametrize("limit,safe,margin", [(10.0, True, 7.0), (2.5, False, -0.5), (3.0, True, 0.0)])
def test_scalar_certificate(limit, safe, margin):
    cert = certify_safe(ConstraintSet([[1.0]], [limit]), [[1.0]], [scalar_ellipsoid()], [ONE])
    assert cert.safe is safe
    assert cert.margin == pytest.approx(margin)


def test_negative_coefficient_with_clip_contributes_zero():
    ell = ConfidenceEllipsoid(np.array([0.5]), np.eye(1), 1.0, nonneg_clip=True)
    cons = ConstraintSet([[-1.0]], [0.0])
    assert worst_case_load(cons, [[1.0]], [ell], [ONE])[0, 0] == 0.0
    unclipped = ConfidenceEllipsoid(np.array([0.5]), np.eye(1), 1.0)
    assert worst_case_load(cons, [[1.0]], [unclipped], [ONE])[0, 0] == pytest.approx(0.5)


def sample_in(ell, rng, k):
    m = len(ell.center)
    u = rng.normal(size=(k, m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.uniform(0, 1, (k, 1)) ** (1 / m)
    chol = np.linalg.cholesky(ell.gram)
    return ell.center + ell.radius * np.linalg.solve(chol.T, u.T).T


def test_worst_case_dominates_sampled_loads(rng, dr_basis):
    ells = []
    for _ in range(2):
        a = rng.normal(size=(2, 2))
        ells.append(ConfidenceEllipsoid(rng.uniform(0.3, 1, 2), a @ a.T + np.eye(2), 0.5))
    cons = ConstraintSet(rng.uniform(-1, 1, (3, 2)), np.zeros(3))
    prices = rng.uniform(1, 4, (2, 3))
    bound = worst_case_load(cons, prices, ells, [dr_basis] * 2)
    th = [sample_in(e, rng, 10_000) for e in ells]
    x = np.stack([th[i] @ dr_basis(prices[i]).T for i in range(2)], axis=1)   # (k, n, V)
    loads = np.einsum("pi,kiv->kpv", cons.coefficients, x)
    assert np.all(loads <= bound + 1e-9)


def test_initial_safe_points_analytic():
    grid = PriceGrid(((0,),), (0.5, 1.0), 1)
    cons = ConstraintSet([[1.0]], [1.0])
    pts = initial_safe_points(grid, cons, [EXP], 1.0, 0.5)
    assert [grid.options[p[0]][0] for p in pts] == [1.0]
    assert np.exp(-1.0) <= 0.5 < np.exp(-0.5)


def test_zero_basis_gives_whole_grid():
    zero = CallableBasis(lambda p: np.zeros((1, 2)), 1, 2)
    grid = PriceGrid(((0,), (1,)), (2.0, 5.0), 1)
    cons = ConstraintSet([[1.0, 1.0]], [0.0])
    assert initial_safe_points(grid, cons, [zero] * 2, 1.0, 0.0) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_empty_initial_set_names_constraint():
    grid = PriceGrid(((0,),), (0.5,), 1)
    cons = ConstraintSet([[1.0]], [0.1], names=("flow:head",))
    with pytest.raises(ConfigurationError, match="flow:head"):
        initial_safe_points(grid, cons, [EXP], 1.0, 0.0)
    with pytest.raises(ValueError):
        initial_safe_points(grid, cons, [EXP], 0.0, 0.0)


def test_enumerate_joint_examples():
    assert enumerate_joint(PriceGrid(((0,),), (2, 5), 1)) == [((2.0,),), ((5.0,),)]
    two = enumerate_joint(PriceGrid(((0,), (1,)), (2, 5), 1))
    assert two == [((2.0,), (2.0,)), ((2.0,), (5.0,)), ((5.0,), (2.0,)), ((5.0,), (5.0,))]
    grid = PriceGrid(((0,), (1,), (2,)), (2, 5), 3)
    assert len(enumerate_joint(grid)) == (2 ** 3) ** 3
    assert len(set(enumerate_joint(grid))) == 512


def test_grid_validation():
    with pytest.raises(ValueError):
        PriceGrid(((0,), (0, 1)), (2,), 1)
    with pytest.raises(ValueError):
        PriceGrid(((0, 2),), (2,), 1)


@given(st.floats(0, 3), st.floats(0, 1))
def test_shrinking_radius_never_unsafes(r, shrink):
    rng = np.random.default_rng(3)
    cons = ConstraintSet(rng.uniform(-1, 1, (2, 2)), rng.uniform(0, 2, 2))
    basis = CallableBasis(lambda p: np.array([[np.exp(-p[0]), 0.3]]), 1, 2)
    centers = rng.uniform(0, 1, (2, 2))
    big = [ConfidenceEllipsoid(c, np.eye(2) * 2, r) for c in centers]
    small = [ConfidenceEllipsoid(c, np.eye(2) * 2, r * shrink) for c in centers]
    p = [[1.0], [2.0]]
    a = certify_safe(cons, p, big, [basis] * 2)
    b = certify_safe(cons, p, small, [basis] * 2)
    assert b.margin >= a.margin - 1e-12
    assert b.safe or not a.safe


@pytest.fixture(scope="module")
def scenario():
    return load_scenario("default")


def test_initial_points_recertify_under_covering_ellipsoids(scenario):
    grid, cons = scenario.grid(), scenario.constraints()
    bases = [scenario.basis()] * scenario.users
    d0 = set(initial_safe_points(grid, cons, bases, scenario.norm_bound, scenario.margin))
    # a ball of radius S around 0 covers the prior set {theta >= 0, ||theta|| <= S}
    ball = ConfidenceEllipsoid(np.zeros(2), np.eye(2), scenario.norm_bound, nonneg_clip=True)
    # with h >= 0 the ball bound equals the prior bound, so D0 is exactly margin >= zeta
    for joint in grid.joint_indices():
        cert = certify_safe(cons, grid.user_prices(joint), [ball] * scenario.users, bases)
        assert (cert.margin >= scenario.margin - 1e-9) == (tuple(joint) in d0)
        if tuple(joint) in d0:
            assert cert.safe


def test_zero_radius_matches_true_feasibility(scenario):
    problem = build_problem(scenario, "spr", 0)
    grid, cons = problem.grid, problem.constraints
    truth = [m.theta_true for m in problem.env.models]
    ells = [ConfidenceEllipsoid(th, np.eye(2), 0.0) for th in truth]
    features = option_features(grid, problem.env.bases)
    up, lo = ellipsoid_bounds(features, ells)
    certified = load_margins(cons, candidate_loads(grid, cons, up, lo)) >= 0
    np.testing.assert_array_equal(certified, problem.table.feasible)
    means = true_option_means(problem.env, grid)
    direct = [cons.feasible(means[np.arange(grid.users), j[grid.group_of]]) for j in grid.joint_indices()]
    np.testing.assert_array_equal(certified, direct)


def test_exploration_ellipsoids_certify_only_truly_safe(scenario):
    # 20 exploration runs x 512 candidates, checked against the hidden truth
    checks = 0
    for seed in range(20):
        problem = build_problem(scenario, "spr", seed, horizon=52, exploration=52)
        trace = run_spr(problem.env, problem.constraints, problem.grid, problem.config)
        cfg = problem.config
        features = option_features(problem.grid, problem.env.bases)
        states = trace.meta["final_states"]
        sched = BetaSchedule(cfg.sigma, 2, cfg.nu, cfg.norm_bound, cfg.delta, len(states), basis_bound(features))
        ells = [ConfidenceEllipsoid.from_state(s, sqrt_beta(sched, s.sample_count)) for s in states]
        up, lo = ellipsoid_bounds(features, ells)
        safe = load_margins(problem.constraints, candidate_loads(problem.grid, problem.constraints, up, lo)) >= 0
        assert np.all(problem.table.feasible[safe])
        assert all(contains(e, m.theta_true) for e, m in zip(ells, problem.env.models))
        checks += len(safe)
    assert checks >= 10_000
