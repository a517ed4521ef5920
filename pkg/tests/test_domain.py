"""Tests for the simplex domain: recipe types, sampling, projection, optimizer."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from mixbo import domain, gp
from mixbo.acquisition import (
    AcquisitionSpec,
    ConstraintSpec,
    NoisyEiEvaluator,
    ObjectiveSpec,
)
from mixbo.errors import (
    AllStartsInfeasible,
    DimensionMismatch,
    EmptyDomain,
    InvalidInput,
    RejectionBudgetExceeded,
    SchemaError,
)


def uniform_simplex(rng, n):
    """Uniform draws on the 4-simplex via sorted spacings.

    Independent of the Dirichlet sampler under test: order statistics of
    uniforms, not gamma draws.
    """
    cuts = np.sort(rng.uniform(size=(n, 3)), axis=1)
    padded = np.concatenate(
        [np.zeros((n, 1)), cuts, np.ones((n, 1))], axis=1
    )
    return np.diff(padded, axis=1)


def slsqp_projection(v, upper_bounds):
    starts = [
        np.full(4, 0.25),
        np.array([0.7, 0.1, 0.1, 0.1]),
        np.array([0.1, 0.7, 0.1, 0.1]),
        np.array([0.4, 0.4, 0.15, 0.05]),
    ]
    best = None
    for x0 in starts:
        result = minimize(
            lambda x: 0.5 * np.sum((x - v) ** 2),
            x0=np.minimum(x0, upper_bounds),
            jac=lambda x: x - v,
            bounds=[(0.0, u) for u in upper_bounds],
            constraints=[
                {
                    "type": "eq",
                    "fun": lambda x: x.sum() - 1.0,
                    "jac": lambda x: np.ones(4),
                }
            ],
            method="SLSQP",
            options={"ftol": 1e-12, "maxiter": 500},
        )
        if result.success and (best is None or result.fun < best.fun):
            best = result
    assert best is not None
    return best.x


def bump_model(dom, center, n=24, lengthscale=0.5, seed=11):
    """GP with frozen hyperparameters fit to a unimodal bump on the simplex."""
    samples = domain.sample_dirichlet_rejection(dom, n, seed=seed).recipes
    X = np.stack([r.as_array() for r in samples])
    y = np.exp(-8.0 * np.sum((X - center) ** 2, axis=1))
    F = dom.feature_map.features_batch(X)
    lower, upper = dom.feature_map.bounds(dom)
    scaling = gp.ScalingSpec(lower, upper).with_output_stats(y)
    hp = gp.KernelHyperparams(
        lengthscales=np.full(F.shape[1], lengthscale),
        signal_variance=1.0,
        noise_variance=1e-6,
    )
    return gp.GpModel.from_data(F, y, scaling, hp), X, y


# ---------------------------------------------------------------- recipes


def test_recipe_dict_roundtrip():
    recipe = domain.MixtureRecipe(0.5, 0.2, 0.2, 0.1)
    again = domain.MixtureRecipe.from_dict(recipe.to_dict())
    assert np.array_equal(recipe.as_array(), again.as_array())


def test_recipe_sum_violation_rejected():
    with pytest.raises(InvalidInput):
        domain.MixtureRecipe(0.5, 0.5, 0.1, 0.0)


def test_recipe_fraction_outside_unit_interval_rejected():
    with pytest.raises(InvalidInput):
        domain.MixtureRecipe(1.2, -0.2, 0.0, 0.0)
    with pytest.raises(InvalidInput):
        domain.MixtureRecipe(-0.1, 0.9, 0.1, 0.1)


def test_recipe_nan_rejected():
    with pytest.raises(InvalidInput):
        domain.MixtureRecipe(float("nan"), 0.5, 0.3, 0.2)


def test_from_array_clips_sub_tolerance_dust():
    arr = np.array([0.5, 0.3, 0.2 + 1e-13, -1e-13])
    recipe = domain.MixtureRecipe.from_array(arr)
    assert recipe.impact_modifier == 0.0
    assert abs(sum(recipe.as_array()) - 1.0) < 1e-9


def test_from_array_wrong_length():
    with pytest.raises(DimensionMismatch):
        domain.MixtureRecipe.from_array([0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_recipe_from_simplex_point_always_constructible(seed):
    rng = np.random.default_rng(seed)
    point = uniform_simplex(rng, 1)[0]
    recipe = domain.MixtureRecipe.from_array(point)
    assert np.allclose(recipe.as_array(), point, atol=1e-12)


# ----------------------------------------------------------------- domain


def test_default_domain_bounds():
    dom = domain.DomainSpec.plain()
    assert np.array_equal(dom.upper_bounds, [1.0, 1.0, 0.3, 0.2])
    assert dom.feature_map.dim == 4


def test_empty_domain_rejected():
    with pytest.raises(EmptyDomain):
        domain.DomainSpec.plain([0.3, 0.3, 0.2, 0.1])


def test_invalid_bounds_rejected():
    with pytest.raises(InvalidInput):
        domain.DomainSpec.plain([1.0, 0.0, 0.3, 0.2])
    with pytest.raises(InvalidInput):
        domain.DomainSpec.plain([1.5, 1.0, 0.3, 0.2])


def test_contains_checks_domain_bounds():
    dom = domain.DomainSpec.plain()
    assert dom.contains(domain.MixtureRecipe(0.45, 0.3, 0.25, 0.0))
    wide = domain.MixtureRecipe(0.3, 0.3, 0.35, 0.05)
    assert not dom.contains(wide)


def test_domain_dict_roundtrip():
    plain = domain.DomainSpec.plain([1.0, 0.8, 0.3, 0.2])
    back = domain.DomainSpec.from_dict(plain.to_dict())
    assert np.array_equal(back.upper_bounds, plain.upper_bounds)
    assert back.feature_map == plain.feature_map

    aug = domain.DomainSpec.augmented()
    back = domain.DomainSpec.from_dict(aug.to_dict())
    assert back.feature_map == aug.feature_map
    with pytest.raises(SchemaError):
        domain.DomainSpec.from_dict({"feature_map": "polynomial"})


# ------------------------------------------------- sheets and feature maps


def _sheet_records():
    return domain.default_ingredient_sheets().to_records()


def test_sheet_set_requires_one_sheet_per_role():
    records = _sheet_records()
    with pytest.raises(SchemaError):
        domain.IngredientSheetSet.from_records(records[:3])
    doubled = records[:3] + [dict(records[0], material_id="other")]
    with pytest.raises(SchemaError):
        domain.IngredientSheetSet.from_records(doubled)


def test_sheet_order_is_canonical():
    records = _sheet_records()
    shuffled = [records[2], records[0], records[3], records[1]]
    sheets = domain.IngredientSheetSet.from_records(shuffled)
    assert tuple(s.role for s in sheets.sheets) == domain.ROLES


def test_sheet_values_must_be_positive():
    records = _sheet_records()
    records[0]["nominal_mfr_g_per_10min"] = 0.0
    with pytest.raises(SchemaError):
        domain.IngredientSheetSet.from_records(records)


def test_sheet_missing_field_rejected():
    records = _sheet_records()
    del records[1]["nominal_youngs_mpa"]
    with pytest.raises(SchemaError):
        domain.IngredientSheetSet.from_records(records)


def test_sheet_json_file_roundtrip(tmp_path):
    path = tmp_path / "sheets.json"
    path.write_text(json.dumps(_sheet_records()))
    sheets = domain.IngredientSheetSet.from_json_file(path)
    assert np.array_equal(
        sheets.property_matrix(),
        domain.default_ingredient_sheets().property_matrix(),
    )

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        domain.IngredientSheetSet.from_json_file(bad)
    scalar = tmp_path / "scalar.json"
    scalar.write_text('{"material_id": "x"}')
    with pytest.raises(SchemaError):
        domain.IngredientSheetSet.from_json_file(scalar)


def test_plain_features_are_the_fractions():
    fm = domain.PlainFeatureMap()
    X = uniform_simplex(np.random.default_rng(1), 20)
    assert np.array_equal(fm.features_batch(X), X)


def test_augmented_features_hand_computed():
    fm = domain.AugmentedFeatureMap()
    x = np.array([0.5, 0.2, 0.2, 0.1])
    out = fm.features_batch(x[None, :])[0]
    assert out.shape == (11,)
    assert np.array_equal(out[:4], x)
    # Mixture-weighted nominals from the default sheets.
    mfr = 0.5 * 12.0 + 0.2 * 30.0 + 0.2 * 0.5 + 0.1 * 3.0
    youngs = 0.5 * 1600.0 + 0.2 * 800.0 + 0.2 * 3500.0 + 0.1 * 300.0
    impact = 0.5 * 5.0 + 0.2 * 2.0 + 0.2 * 0.5 + 0.1 * 25.0
    assert np.allclose(out[4:7], [mfr, youngs, impact], rtol=1e-12)
    contributions = np.array([6.0, 6.0, 0.1, 0.3])
    assert np.allclose(out[7:], contributions / mfr, rtol=1e-12)


def test_augmented_features_are_deterministic():
    fm = domain.AugmentedFeatureMap()
    X = uniform_simplex(np.random.default_rng(2), 50)
    assert np.array_equal(fm.features_batch(X), fm.features_batch(X))


def test_augmented_bounds_contain_sampled_features():
    dom = domain.DomainSpec.augmented()
    samples = domain.sample_dirichlet_rejection(dom, 10_000, seed=5).recipes
    X = np.stack([r.as_array() for r in samples])
    F = dom.feature_map.features_batch(X)
    lower, upper = dom.feature_map.bounds(dom)
    assert F.shape == (10_000, 11)
    assert np.all(F >= lower[None, :] - 1e-9)
    assert np.all(F <= upper[None, :] + 1e-9)


# --------------------------------------------------------------- sampling


def test_unit_bounds_accept_everything():
    dom = domain.DomainSpec.plain([1.0, 1.0, 1.0, 1.0])
    result = domain.sample_dirichlet_rejection(dom, 10_000, seed=0)
    assert result.acceptance_rate == 1.0
    X = np.stack([r.as_array() for r in result.recipes])
    assert np.allclose(X.mean(axis=0), 0.25, atol=0.02)


def test_acceptance_rate_matches_independent_mc():
    dom = domain.DomainSpec.plain()
    result = domain.sample_dirichlet_rejection(dom, 40_000, seed=9)
    p_impl = result.acceptance_rate
    se_impl = math.sqrt(p_impl * (1.0 - p_impl) / result.proposed)

    cloud = uniform_simplex(np.random.default_rng(1234), 200_000)
    ok = np.all(cloud <= dom.upper_bounds[None, :], axis=1)
    p_mc = float(ok.mean())
    se_mc = math.sqrt(p_mc * (1.0 - p_mc) / len(cloud))

    assert abs(p_impl - p_mc) <= 3.0 * math.hypot(se_impl, se_mc)


def test_sampling_deterministic_per_seed():
    dom = domain.DomainSpec.plain()
    a = domain.sample_dirichlet_rejection(dom, 10, seed=123)
    b = domain.sample_dirichlet_rejection(dom, 10, seed=123)
    c = domain.sample_dirichlet_rejection(dom, 10, seed=124)
    Xa = np.stack([r.as_array() for r in a.recipes])
    Xb = np.stack([r.as_array() for r in b.recipes])
    Xc = np.stack([r.as_array() for r in c.recipes])
    assert np.array_equal(Xa, Xb)
    assert not np.array_equal(Xa, Xc)


def test_samples_satisfy_all_recipe_invariants():
    dom = domain.DomainSpec.plain()
    result = domain.sample_dirichlet_rejection(dom, 5000, seed=3)
    X = np.stack([r.as_array() for r in result.recipes])
    assert np.all(X >= 0.0)
    assert np.all(X <= dom.upper_bounds[None, :])
    assert np.all(np.abs(X.sum(axis=1) - 1.0) <= 1e-9)
    assert result.proposed == result.accepted + result.rejected
    assert result.acceptance_rate == result.accepted / result.proposed


def test_rejection_budget_exceeded_on_measure_zero_region():
    # Bounds sum to exactly one: the only feasible point has probability zero.
    dom = domain.DomainSpec.plain([0.4, 0.4, 0.15, 0.05])
    with pytest.raises(RejectionBudgetExceeded) as info:
        domain.sample_dirichlet_rejection(dom, 1, seed=0)
    assert info.value.detail["upper_bounds"] == [0.4, 0.4, 0.15, 0.05]


def test_tiny_feasible_region_still_succeeds():
    dom = domain.DomainSpec.plain([0.29, 0.29, 0.3, 0.2])
    result = domain.sample_dirichlet_rejection(dom, 3, seed=0)
    assert len(result.recipes) == 3
    assert result.acceptance_rate < 0.01
    for recipe in result.recipes:
        assert dom.contains(recipe)


def test_sampling_argument_validation():
    dom = domain.DomainSpec.plain()
    with pytest.raises(InvalidInput):
        domain.sample_dirichlet_rejection(dom, 0)
    with pytest.raises(InvalidInput):
        domain.sample_dirichlet_rejection(dom, 5, alpha=[1.0, 1.0])
    with pytest.raises(InvalidInput):
        domain.sample_dirichlet_rejection(dom, 5, alpha=[1.0, 1.0, -1.0, 1.0])


# ------------------------------------------------------------- projection


def test_projection_idempotent_on_feasible_points():
    dom = domain.DomainSpec.plain()
    samples = domain.sample_dirichlet_rejection(dom, 200, seed=8).recipes
    for recipe in samples:
        projected = domain.project_feasible(recipe.as_array(), dom)
        assert np.allclose(
            projected.as_array(), recipe.as_array(), atol=1e-12
        )


def test_projection_vertex_fixed_point():
    projected = domain.project_feasible([1.0, 0.0, 0.0, 0.0])
    assert np.array_equal(projected.as_array(), [1.0, 0.0, 0.0, 0.0])


def test_projection_matches_qp_solver():
    dom = domain.DomainSpec.plain()
    rng = np.random.default_rng(42)
    for _ in range(200):
        v = rng.uniform(-1.5, 2.5, size=4)
        mine = domain.project_feasible(v, dom).as_array()
        ref = slsqp_projection(v, dom.upper_bounds)
        assert np.linalg.norm(mine - ref) < 1e-6


def test_projection_far_points_satisfy_optimality_certificate():
    # P(v) is the projection iff (v - P(v)) . (y - P(v)) <= 0 for every
    # feasible y; check against a large feasible cloud.
    dom = domain.DomainSpec.plain()
    rng = np.random.default_rng(7)
    cloud = uniform_simplex(rng, 400_000)
    cloud = cloud[np.all(cloud <= dom.upper_bounds[None, :], axis=1)]
    for scale in (1e2, 1e4, 3e5):
        v = rng.uniform(-scale, scale, size=4)
        x = domain.project_feasible(v, dom).as_array()
        inner = (cloud - x[None, :]) @ (v - x)
        assert inner.max() <= 1e-6 * max(1.0, scale)


def test_projection_of_center_point_against_feasible_cloud():
    dom = domain.DomainSpec.plain()
    v = np.array([0.5, 0.5, 0.5, 0.5])
    projected = domain.project_feasible(v, dom).as_array()
    d_proj = np.linalg.norm(v - projected)
    cloud = uniform_simplex(np.random.default_rng(77), 4_000_000)
    cloud = cloud[np.all(cloud <= dom.upper_bounds[None, :], axis=1)][
        :1_000_000
    ]
    assert len(cloud) == 1_000_000
    d_cloud = np.min(np.linalg.norm(cloud - v[None, :], axis=1))
    assert d_proj <= d_cloud + 1e-12
    assert d_cloud - d_proj < 1e-3


def test_projection_nonexpansive():
    dom = domain.DomainSpec.plain()
    rng = np.random.default_rng(11)
    for _ in range(500):
        a = rng.uniform(-2.0, 3.0, size=4)
        b = rng.uniform(-2.0, 3.0, size=4)
        pa = domain.project_feasible(a, dom).as_array()
        pb = domain.project_feasible(b, dom).as_array()
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-9


def test_projection_respects_custom_bounds():
    dom = domain.DomainSpec.plain([0.5, 0.5, 0.3, 0.2])
    projected = domain.project_feasible([1.0, 0.0, 0.0, 0.0], dom).as_array()
    ref = slsqp_projection(np.array([1.0, 0.0, 0.0, 0.0]), dom.upper_bounds)
    assert projected[0] <= 0.5 + 1e-12
    assert np.linalg.norm(projected - ref) < 1e-6


def test_projection_input_validation():
    with pytest.raises(DimensionMismatch):
        domain.project_feasible([0.5, 0.5])
    with pytest.raises(InvalidInput):
        domain.project_feasible([0.5, float("nan"), 0.2, 0.1])


# -------------------------------------------------------------- optimizer


def _maximize_spec(constraints=()):
    return AcquisitionSpec(
        objective=ObjectiveSpec.maximize_metric("impact_strength"),
        constraints=constraints,
        mc_samples=64,
        smoothing_temperature=1e-4,
    )


def test_optimizer_matches_dense_cloud_argmax():
    dom = domain.DomainSpec.plain()
    center = np.array([0.4, 0.3, 0.15, 0.15])
    model, X_train, _ = bump_model(dom, center)
    spec = _maximize_spec()

    result = domain.optimize_acquisition(
        {"impact_strength": model}, spec, dom, batch_size=1, starts=16, seed=5
    )
    chosen = result.recipes[0].as_array()

    cloud = uniform_simplex(np.random.default_rng(99), 4_000_000)
    cloud = cloud[np.all(cloud <= dom.upper_bounds[None, :], axis=1)][
        :1_000_000
    ]
    evaluator = NoisyEiEvaluator(model, X_train, spec)
    best_value = -np.inf
    best_point = None
    for start in range(0, len(cloud), 100_000):
        block = cloud[start : start + 100_000]
        values = evaluator.scores(block)
        i = int(np.argmax(values))
        if values[i] > best_value:
            best_value = float(values[i])
            best_point = block[i]

    assert np.linalg.norm(chosen - best_point) <= 0.02
    assert result.acquisition_values[0] >= best_value - 1e-6


def test_optimizer_monotone_and_deterministic():
    dom = domain.DomainSpec.plain()
    model, _, _ = bump_model(dom, np.array([0.4, 0.3, 0.15, 0.15]))
    spec = _maximize_spec()
    a = domain.optimize_acquisition(
        {"impact_strength": model}, spec, dom, batch_size=1, starts=8, seed=2
    )
    b = domain.optimize_acquisition(
        {"impact_strength": model}, spec, dom, batch_size=1, starts=8, seed=2
    )
    assert np.array_equal(a.recipes[0].as_array(), b.recipes[0].as_array())
    assert a.acquisition_values == b.acquisition_values
    assert (
        a.acquisition_values[0] >= a.feasibility[0]["initial_best"] - 1e-9
    )


def test_optimizer_batch_members_distinct_and_feasible():
    dom = domain.DomainSpec.plain()
    model, _, _ = bump_model(dom, np.array([0.4, 0.3, 0.15, 0.15]))
    spec = _maximize_spec(
        constraints=(ConstraintSpec.at_least("impact_strength", 0.2),)
    )
    result = domain.optimize_acquisition(
        {"impact_strength": model},
        spec,
        dom,
        batch_size=3,
        starts=8,
        seed=5,
        max_iterations=40,
    )
    assert len(result.recipes) == 3
    arrays = [r.as_array() for r in result.recipes]
    for i in range(3):
        assert dom.contains(result.recipes[i])
        for j in range(i + 1, 3):
            assert np.linalg.norm(arrays[i] - arrays[j]) > 1e-6
    for report in result.feasibility:
        assert set(report["per_constraint_pof"]) == {
            "impact_strength_at_least_0.2"
        }
    assert len(result.trace) == 3
    assert result.diagnostics["starts"] == 8


def test_optimizer_raises_when_all_starts_infeasible():
    # Model confidently predicts impact near 1 everywhere; demanding at
    # least 8 leaves no feasible probability mass anywhere.
    dom = domain.DomainSpec.plain()
    rng = np.random.default_rng(4)
    samples = domain.sample_dirichlet_rejection(dom, 40, seed=4).recipes
    X = np.stack([r.as_array() for r in samples])
    y = 1.0 + 0.01 * rng.standard_normal(len(X))
    lower, upper = dom.feature_map.bounds(dom)
    scaling = gp.ScalingSpec(lower, upper).with_output_stats(y)
    hp = gp.KernelHyperparams(
        lengthscales=np.full(4, 2.0),
        signal_variance=1.0,
        noise_variance=1e-4,
    )
    model = gp.GpModel.from_data(X, y, scaling, hp)
    spec = _maximize_spec(
        constraints=(ConstraintSpec.at_least("impact_strength", 8.0),)
    )
    with pytest.raises(AllStartsInfeasible) as info:
        domain.optimize_acquisition(
            {"impact_strength": model},
            spec,
            dom,
            batch_size=1,
            starts=8,
            seed=1,
            max_iterations=20,
        )
    detail = info.value.detail
    assert detail["member_index"] == 0
    assert detail["best_log_pof"] < math.log(1e-6)
    for pof in detail["per_constraint_best_pof"].values():
        assert pof < 1e-6


def test_optimizer_augmented_mode():
    dom = domain.DomainSpec.augmented()
    center = np.array([0.4, 0.3, 0.15, 0.15])
    model, _, _ = bump_model(dom, center, lengthscale=1.0)
    spec = _maximize_spec()
    result = domain.optimize_acquisition(
        {"impact_strength": model},
        spec,
        dom,
        batch_size=1,
        starts=8,
        seed=3,
        max_iterations=30,
    )
    recipe = result.recipes[0]
    assert dom.contains(recipe)
    # The augmentation is a pure function of the recipe.
    once = dom.feature_map.features_batch(recipe.as_array()[None, :])
    again = dom.feature_map.features_batch(recipe.as_array()[None, :])
    assert np.array_equal(once, again)


def test_optimizer_argument_validation():
    dom = domain.DomainSpec.plain()
    model, _, _ = bump_model(dom, np.array([0.4, 0.3, 0.15, 0.15]))
    spec = _maximize_spec()
    with pytest.raises(InvalidInput):
        domain.optimize_acquisition({}, spec, dom, batch_size=1)
    with pytest.raises(InvalidInput):
        domain.optimize_acquisition(
            {"impact_strength": model}, spec, dom, batch_size=0
        )
    with pytest.raises(InvalidInput):
        domain.optimize_acquisition(
            {"impact_strength": model}, spec, dom, batch_size=1, starts=0
        )
    missing_constraint_model = _maximize_spec(
        constraints=(ConstraintSpec.at_least("mfr", 5.0),)
    )
    with pytest.raises(InvalidInput):
        domain.optimize_acquisition(
            {"impact_strength": model},
            missing_constraint_model,
            dom,
            batch_size=1,
        )
