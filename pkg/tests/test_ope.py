from dataclasses import replace

import numpy as np
import pytest

from irregular_ope import (
    BasisSpec,
    FeatureMap,
    LinearPolicy,
    Problem,
    ReferenceDistribution,
    TabularPolicy,
    Trajectory,
    estimate,
    evaluate_all,
    fit_renewal,
    gen_dataset,
    scenario,
    value_with_ci,
)
from irregular_ope.core import ContractError, Dataset
from irregular_ope.ope import (
    ConditioningError,
    InfluenceBundle,
    PointMassGapLaw,
    influence_bundle,
    inverse_intensity_weights,
    value_at,
)
from irregular_ope.simulate import intensity

POLICY = LinearPolicy.from_alpha([-1.0, -1.0, 1.0], indicator_action=0)
BOX = ReferenceDistribution.uniform_box([-1.0], [1.0], 0.0, 2.0)
NARROW = ReferenceDistribution.uniform_box([-0.2], [0.2], 0.0, 1.0)
PAIRS = [(m, r) for m in ("standard", "modulated") for r in ("cumulative", "integrated")]


@pytest.fixture(scope="module")
def problem():
    ds = gen_dataset(scenario("scenario2"), 80, 6, seed=21)
    fm = FeatureMap.from_data(ds, BasisSpec(q_s=1, q_x=1))
    return Problem(ds, POLICY, fm, 0.7, fit_renewal(ds))


def _scaled(ds, c):
    trajs = [Trajectory(t.times, t.gaps, t.states, t.actions, c * t.rewards) for t in ds.trajectories]
    return Dataset(trajs, d=ds.d, m=ds.m)


def test_bellman_orthogonality(problem):
    for m in ("naive", "standard", "modulated"):
        for r in ("cumulative", "integrated"):
            model = estimate(problem, m, r)
            assert model.orthogonality <= 1e-8
            assert np.all(np.isfinite(model.theta)) and model.theta.shape == (problem.fmap.size,)


def test_scalar_closed_form():
    # constant basis, one action: theta = sum g^X R / sum (1 - g^X)
    gaps = np.array([[1.0, 0.5, 2.0], [1.0, 1.5, 0.25]])
    trajs = [Trajectory(np.concatenate([[0.0], np.cumsum(g[1:])]), g, np.zeros(3), np.zeros(2, int),
                        np.array([1.0, -2.0]) * (i + 1)) for i, g in enumerate(gaps)]
    ds = Dataset(trajs, d=1, m=1)
    fm = FeatureMap.from_interior([[]], [], BasisSpec(degree=0, q_s=0, q_x=0), m=1)
    assert fm.size == 1
    p = Problem(ds, TabularPolicy([1.0]), fm, 0.7)
    tr = ds.transitions
    g = 0.7 ** tr.x_next
    expect = np.sum(g * tr.r) / np.sum(1 - g)
    assert estimate(p, "standard").theta[0] == pytest.approx(expect, abs=1e-12)


def test_degenerate_gap_law_gives_standard():
    ds = gen_dataset(scenario("scenario2"), 60, 5, seed=22)
    fm = FeatureMap.from_data(ds, BasisSpec(q_s=1, q_x=1))
    law = PointMassGapLaw(ds.transitions.x_next)
    p = Problem(ds, POLICY, fm, 0.7, law=law)
    np.testing.assert_allclose(estimate(p, "modulated").theta, estimate(p, "standard").theta, atol=1e-10)


def test_unit_gaps_naive_equals_standard():
    ds = gen_dataset(scenario("scenario1"), 40, 5, seed=23)
    trajs = [Trajectory(np.arange(t.K + 1.0), np.ones(t.K + 1), t.states, t.actions, t.rewards)
             for t in ds.trajectories]
    unit = Dataset(trajs, d=1)
    # a constant gap leaves one usable gap function: piecewise-constant basis
    fm = FeatureMap.from_data(unit, BasisSpec(degree=0, q_s=3, q_x=0))
    p = Problem(unit, POLICY, fm, 0.7)
    np.testing.assert_allclose(estimate(p, "naive").theta, estimate(p, "standard").theta, atol=1e-12)


def test_reward_scale_equivariance(problem):
    c = -3.5
    ds2 = _scaled(problem.dataset, c)
    p2 = Problem(ds2, POLICY, problem.fmap, 0.7, problem.fit)
    targets = {"cumulative": BOX, "integrated": NARROW}
    a, ma = evaluate_all(problem, ["naive", "standard", "modulated"], list(targets), targets)
    b, mb = evaluate_all(p2, ["naive", "standard", "modulated"], list(targets), targets)
    for key in a:
        np.testing.assert_allclose(mb[key].theta, c * ma[key].theta, rtol=1e-9, atol=1e-12)
        assert b[key].value == pytest.approx(c * a[key].value, rel=1e-9)
        if key[0] != "naive":
            assert b[key].se == pytest.approx(abs(c) * a[key].se, rel=1e-8)


def test_zero_rewards_give_zero_value(problem):
    p0 = Problem(_scaled(problem.dataset, 0.0), POLICY, problem.fmap, 0.7, problem.fit)
    targets = {"cumulative": BOX, "integrated": NARROW}
    out, models = evaluate_all(p0, ["naive", "standard", "modulated"], list(targets), targets)
    for key, est in out.items():
        assert np.all(models[key].theta == 0)
        assert est.value == 0.0


def test_unit_residual_omega():
    rng = np.random.default_rng(0)
    Xi = rng.normal(size=(30, 4))
    b = InfluenceBundle.build(Xi, np.ones(30), np.zeros((30, 4)), np.eye(4))
    np.testing.assert_allclose(b.Omega, Xi.T @ Xi / 30, atol=1e-14)


def test_first_order_condition_and_psd(problem):
    for m, r in PAIRS:
        model = estimate(problem, m, r)
        bundle = influence_bundle(problem, model)
        if (m, r) == ("standard", "cumulative"):
            assert np.max(np.abs((problem.Xi * bundle.resid[:, None]).mean(axis=0))) <= 1e-8
        np.testing.assert_allclose(bundle.Omega, bundle.Omega.T, atol=1e-14)
        assert np.linalg.eigvalsh(bundle.Omega)[0] >= -1e-8
        est = value_with_ci(problem, m, r, BOX, model=model)
        assert est.se > 0
        assert est.ci[0] == pytest.approx(est.value - 1.959963984540054 * est.se)


def test_evaluate_all_matches_single_calls(problem):
    targets = {"cumulative": BOX, "integrated": NARROW}
    out, _ = evaluate_all(problem, ["standard", "modulated"], list(targets), targets)
    for m, r in PAIRS:
        single = value_with_ci(problem, m, r, targets[r])
        assert out[(m, r)].value == pytest.approx(single.value, abs=1e-12)
        assert out[(m, r)].se == pytest.approx(single.se, rel=1e-10)


def test_naive_has_no_variance(problem):
    est = value_with_ci(problem, "naive", "cumulative", BOX)
    assert np.isnan(est.se)
    with pytest.raises(ContractError):
        influence_bundle(problem, estimate(problem, "naive"))


def test_missing_fit_is_a_contract_error(problem):
    p = Problem(problem.dataset, POLICY, problem.fmap, 0.7)
    with pytest.raises(ContractError):
        estimate(p, "modulated")
    with pytest.raises(ContractError):
        estimate(p, "standard", "integrated")


def test_conditioning_error_on_oversized_basis():
    ds = gen_dataset(scenario("scenario1"), 3, 3, seed=24)
    fm = FeatureMap.from_data(ds, BasisSpec(q_s=4, q_x=4))
    with pytest.raises((ConditioningError, np.linalg.LinAlgError)):
        estimate(Problem(ds, POLICY, fm, 0.7), "standard")


def test_inverse_intensity_weights():
    r = np.array([1.0, -2.0, 3.0])
    w, n = inverse_intensity_weights(r, np.full(3, 2.0))
    np.testing.assert_array_equal(w, r / 2)
    assert n == 0
    w, n = inverse_intensity_weights(r, np.array([1.0, 0.0, 1e-9]))
    assert n == 2 and w[1] == -2.0 / 1e-6
    w, _ = inverse_intensity_weights(r, np.ones(3))
    np.testing.assert_array_equal(w, r)


def test_fitted_weights_track_true_weights():
    ds = gen_dataset(scenario("scenario2"), 1000, 10, seed=25)
    fit = fit_renewal(ds)
    tr = ds.transitions
    fitted = fit.kernel_lambda0(tr.x_next) * np.exp(fit.eta)
    true = intensity("X2", tr.x_next, tr.s[:, 0], tr.x, tr.a)
    assert np.corrcoef(tr.r / fitted, tr.r / true)[0, 1] > 0.95


def test_value_at_targets(problem):
    model = estimate(problem, "standard")
    zero = replace(model, theta=np.zeros_like(model.theta))
    assert value_at(zero, POLICY, problem.fmap, BOX) == 0.0
    P = ReferenceDistribution.point_mass([0.3], 0.9)
    assert value_at(model, POLICY, problem.fmap, P) == pytest.approx(
        value_at(model, POLICY, problem.fmap, ([0.3], 0.9)), abs=1e-14)
    two = replace(model, theta=2 * model.theta)
    assert value_at(two, POLICY, problem.fmap, BOX) == pytest.approx(
        2 * value_at(model, POLICY, problem.fmap, BOX), rel=1e-12)


def test_null_model_coverage():
    # rewards are pure noise, so every Q-function and value is zero
    spec = scenario("scenario1", reward_fn=lambda s, a, sn, xn, noise: noise)
    hits = 0
    reps = 200
    for r in range(reps):
        ds = gen_dataset(spec, 60, 5, seed=np.random.SeedSequence(26, spawn_key=(r,)))
        fm = FeatureMap.from_data(ds, BasisSpec(q_s=1, q_x=0))
        est = value_with_ci(Problem(ds, POLICY, fm, 0.7), "standard", "cumulative", BOX)
        hits += est.ci[0] <= 0.0 <= est.ci[1]
    assert 0.90 <= hits / reps <= 0.99
