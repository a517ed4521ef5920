"""Tests for the synthetic and data-trained ground-truth sources."""

import csv
import math

import numpy as np
import pytest

from mixbo import domain, oracle
from mixbo.errors import (
    InvalidInput,
    NonPositiveMetric,
    OutOfDomain,
    SchemaError,
)


def uniform_feasible(rng, n):
    """Uniform feasible-domain samples via sorted spacings plus filtering."""
    out = []
    bounds = domain.DomainSpec.plain().upper_bounds
    while sum(len(b) for b in out) < n:
        cuts = np.sort(rng.uniform(size=(4 * n, 3)), axis=1)
        padded = np.concatenate(
            [np.zeros((4 * n, 1)), cuts, np.ones((4 * n, 1))], axis=1
        )
        pts = np.diff(padded, axis=1)
        out.append(pts[np.all(pts <= bounds[None, :], axis=1)])
    return np.concatenate(out)[:n]


def write_experiment_csv(path, X, metrics_by_name):
    columns = [
        "id",
        "batch",
        "virgin_pp",
        "recycled",
        "filler",
        "impact_modifier",
        "mfr_g_per_10min",
        "youngs_mpa",
        "impact_kj_per_m2",
        "provenance",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i, row in enumerate(X):
            writer.writerow(
                [
                    f"e{i:03d}",
                    0,
                    *[f"{v:.12f}" for v in row],
                    f"{metrics_by_name['mfr'][i]:.12f}",
                    f"{metrics_by_name['youngs_modulus'][i]:.12f}",
                    f"{metrics_by_name['impact_strength'][i]:.12f}",
                    "manual_entry",
                ]
            )


# ---------------------------------------------------------------- metrics


def test_metrics_must_be_positive_and_finite():
    with pytest.raises(NonPositiveMetric):
        oracle.QualityMetrics(10.0, 1500.0, 0.0)
    with pytest.raises(NonPositiveMetric):
        oracle.QualityMetrics(-1.0, 1500.0, 8.0)
    with pytest.raises(NonPositiveMetric):
        oracle.QualityMetrics(10.0, float("inf"), 8.0)
    with pytest.raises(NonPositiveMetric):
        oracle.QualityMetrics(10.0, float("nan"), 8.0)


def test_metrics_dict_roundtrip():
    m = oracle.QualityMetrics(9.5, 1620.0, 8.4)
    assert oracle.QualityMetrics.from_dict(m.as_dict()) == m
    with pytest.raises(SchemaError):
        oracle.QualityMetrics.from_dict({"mfr": 9.5})


# ------------------------------------------------------ synthetic surfaces


def test_pure_virgin_matches_direct_formula():
    spec = oracle.OracleSpec.synthetic()
    m = oracle.query(spec, domain.MixtureRecipe(1.0, 0.0, 0.0, 0.0))
    assert m.mfr == 10.0
    assert m.youngs_modulus == 1550.0
    assert m.impact_strength == 4.5


def test_mixed_recipe_matches_direct_formula():
    spec = oracle.OracleSpec.synthetic()
    v, r, f, im = 0.5, 0.2, 0.2, 0.1
    m = oracle.query(spec, domain.MixtureRecipe(v, r, f, im))
    mfr = 10 * v + 30 * r - 12 * f + 3 * im + 4 * v * r
    youngs = 1550 * v + 700 * r + 3100 * f - 1250 * (1 - math.exp(-3 * im))
    impact = (
        4.5 * v
        + 1.5 * r
        - 9 * f
        + 26 * (1 - math.exp(-5 * im))
        - 8 * r * f
    )
    assert abs(m.mfr - mfr) < 1e-12
    assert abs(m.youngs_modulus - youngs) < 1e-10
    assert abs(m.impact_strength - impact) < 1e-12


def test_noiseless_queries_bitwise_identical():
    spec = oracle.OracleSpec.synthetic()
    recipe = domain.MixtureRecipe(0.4, 0.35, 0.15, 0.1)
    assert oracle.query(spec, recipe) == oracle.query(spec, recipe)


def test_noise_reproducible_per_key():
    spec = oracle.OracleSpec.synthetic(noise_std=0.5, seed=9)
    recipe = domain.MixtureRecipe(0.4, 0.35, 0.15, 0.1)
    a = oracle.query(spec, recipe, noise_key="exp-1")
    b = oracle.query(spec, recipe, noise_key="exp-1")
    c = oracle.query(spec, recipe, noise_key="exp-2")
    assert a == b
    assert a != c
    clean = oracle.query(oracle.OracleSpec.synthetic(), recipe)
    assert a != clean


def test_noise_respects_per_metric_std():
    spec = oracle.OracleSpec.synthetic(noise_std={"mfr": 0.5}, seed=9)
    recipe = domain.MixtureRecipe(0.4, 0.35, 0.15, 0.1)
    noisy = oracle.query(spec, recipe, noise_key=3)
    clean = oracle.query(oracle.OracleSpec.synthetic(), recipe)
    assert noisy.mfr != clean.mfr
    assert noisy.youngs_modulus == clean.youngs_modulus
    assert noisy.impact_strength == clean.impact_strength


def test_hostile_corner_floored_to_positive():
    spec = oracle.OracleSpec.synthetic()
    recipe = domain.MixtureRecipe(0.0, 0.7, 0.3, 0.0)
    raw = oracle.query_raw(spec, recipe)
    assert raw["impact_strength"] < 0
    m = oracle.query(spec, recipe)
    assert m.impact_strength == oracle.METRIC_FLOOR


def test_monotonicity_directions_at_centroid():
    params = oracle.SyntheticParams.default()
    centroid = np.full(4, 0.25)
    h = 0.05

    def slope(metric, axis):
        hi = centroid.copy()
        hi[axis] += h
        lo = centroid.copy()
        lo[axis] -= h
        surface = params.surfaces[metric]
        return float(
            surface.evaluate(hi[None])[0] - surface.evaluate(lo[None])[0]
        )

    assert slope("mfr", 2) < 0  # more filler flows worse
    assert slope("mfr", 1) > 0  # recycled content flows better
    assert slope("youngs_modulus", 2) > 0  # filler stiffens
    assert slope("youngs_modulus", 3) < 0  # modifier softens
    assert slope("impact_strength", 3) > 0  # modifier toughens
    assert slope("impact_strength", 2) < 0  # filler embrittles


def test_surfaces_have_bounded_curvature():
    params = oracle.SyntheticParams.default()
    centroid = np.full(4, 0.25)
    h = 1e-3
    for surface in params.surfaces.values():
        for axis in range(4):
            hi = centroid.copy()
            hi[axis] += h
            lo = centroid.copy()
            lo[axis] -= h
            second = (
                float(surface.evaluate(hi[None])[0])
                - 2.0 * float(surface.evaluate(centroid[None])[0])
                + float(surface.evaluate(lo[None])[0])
            ) / h**2
            assert abs(second) < 1e5


def test_stiffness_impact_tradeoff_negative_correlation():
    params = oracle.SyntheticParams.default()
    X = uniform_feasible(np.random.default_rng(21), 10_000)
    values = params.evaluate_all(X)
    r = np.corrcoef(values["youngs_modulus"], values["impact_strength"])[0, 1]
    assert r < -0.2


def test_feasible_region_exists_for_default_landscape():
    report = oracle.landscape_report(oracle.SyntheticParams.default())
    assert report["feasible_fraction"] >= 1e-3
    assert report["youngs_impact_correlation"] < 0


def test_degenerate_landscapes_rejected():
    base = oracle.SyntheticParams.default().to_dict()
    # Stiffness scaled down tenfold: nothing reaches 1500 MPa.
    weak = {
        name: dict(doc) for name, doc in base.items()
    }
    weak["youngs_modulus"] = {
        "offset": 0.0,
        "linear": [155.0, 70.0, 310.0, 0.0],
        "pairs": [],
        "saturating": [[3, -125.0, 3.0]],
    }
    with pytest.raises(InvalidInput):
        oracle.SyntheticParams.from_dict(weak)

    # Impact cloned from stiffness: correlation +1.
    aligned = {name: dict(doc) for name, doc in base.items()}
    aligned["impact_strength"] = dict(base["youngs_modulus"])
    with pytest.raises(InvalidInput):
        oracle.SyntheticParams.from_dict(aligned)


def test_query_rejects_corrupted_recipe():
    spec = oracle.OracleSpec.synthetic()
    recipe = domain.MixtureRecipe(0.5, 0.3, 0.1, 0.1)
    object.__setattr__(recipe, "filler", 0.9)
    with pytest.raises(OutOfDomain):
        oracle.query(spec, recipe)


def test_oracle_spec_json_roundtrip():
    spec = oracle.OracleSpec.synthetic(noise_std={"mfr": 0.25}, seed=17)
    doc = spec.to_dict()
    again = oracle.OracleSpec.from_dict(doc)
    assert again.seed == 17
    assert again.noise_std == {"mfr": 0.25}
    assert again.synthetic_params == spec.synthetic_params
    assert oracle.OracleSpec.from_dict({}).synthetic_params is not None


# -------------------------------------------------------- scarce seed data


def test_scarce_seed_dataset_shape():
    spec = oracle.OracleSpec.synthetic(seed=3)
    data = oracle.scarce_seed_dataset(spec, size=20, seed=0)
    assert len(data) == 20
    joint = impact_ok = 0
    for recipe, metrics in data:
        assert domain.DomainSpec.plain().contains(recipe)
        youngs_feasible = metrics.youngs_modulus >= 1500.0
        impact_feasible = metrics.impact_strength >= 8.0
        joint += youngs_feasible and impact_feasible
        impact_ok += impact_feasible
    assert joint == 0
    assert impact_ok <= 2

    again = oracle.scarce_seed_dataset(spec, size=20, seed=0)
    assert [r.as_array().tolist() for r, _ in data] == [
        r.as_array().tolist() for r, _ in again
    ]
    other = oracle.scarce_seed_dataset(spec, size=20, seed=1)
    assert [r.as_array().tolist() for r, _ in data] != [
        r.as_array().tolist() for r, _ in other
    ]


# ------------------------------------------------------ data-trained kind


def _synthetic_dataset(n, seed):
    X = uniform_feasible(np.random.default_rng(seed), n)
    values = oracle.SyntheticParams.default().evaluate_all(X)
    floored = {
        name: np.maximum(v, oracle.METRIC_FLOOR) for name, v in values.items()
    }
    return X, floored


def test_data_oracle_holdout_accuracy(tmp_path):
    X, metrics = _synthetic_dataset(50, seed=5)
    path = tmp_path / "experiments.csv"
    write_experiment_csv(path, X, metrics)
    fitted, report = oracle.build_data_oracle(path, restarts=4, seed=0)
    assert fitted.kind == "data_trained"
    assert report["validation"] == "holdout"
    assert report["train_fraction"] == 0.85
    for name in oracle.METRIC_NAMES:
        spread = float(metrics[name].max() - metrics[name].min())
        rmse = report["per_metric"][name]["rmse"]
        assert rmse < 0.1 * spread, (name, rmse, spread)
        assert report["per_metric"][name]["points"]


def test_data_oracle_interpolates_training_rows(tmp_path):
    X, metrics = _synthetic_dataset(25, seed=8)
    path = tmp_path / "experiments.csv"
    write_experiment_csv(path, X, metrics)
    fitted, _ = oracle.build_data_oracle(path, restarts=4, seed=0)
    for i in (0, 7, 19):
        recipe = domain.MixtureRecipe.from_array(X[i])
        got = oracle.query(fitted, recipe)
        for name in oracle.METRIC_NAMES:
            model = fitted.models[name]
            noise_raw = math.sqrt(
                model.hyperparams.noise_variance
            ) * model.scaling.output_std
            tolerance = 2.0 * noise_raw + 1e-6 * abs(metrics[name][i])
            assert abs(getattr(got, name) - metrics[name][i]) <= max(
                tolerance, 1e-5
            )


def test_data_oracle_handles_duplicate_rows(tmp_path):
    X, metrics = _synthetic_dataset(10, seed=2)
    X = np.vstack([X, X[:3]])
    metrics = {name: np.concatenate([v, v[:3]]) for name, v in metrics.items()}
    path = tmp_path / "dups.csv"
    write_experiment_csv(path, X, metrics)
    fitted, _ = oracle.build_data_oracle(path, restarts=2, seed=0)
    assert fitted.kind == "data_trained"


def test_data_oracle_loo_mode(tmp_path):
    X, metrics = _synthetic_dataset(8, seed=4)
    path = tmp_path / "loo.csv"
    write_experiment_csv(path, X, metrics)
    fitted, report = oracle.build_data_oracle(
        path, validation="loo", restarts=2, seed=0
    )
    assert report["validation"] == "loo"
    for name in oracle.METRIC_NAMES:
        assert len(report["per_metric"][name]["points"]) == 8
    assert fitted.models[name].train_inputs.shape[0] == 8


def test_data_oracle_schema_errors(tmp_path):
    X, metrics = _synthetic_dataset(4, seed=1)
    short = tmp_path / "short.csv"
    write_experiment_csv(short, X, metrics)
    with pytest.raises(SchemaError):
        oracle.build_data_oracle(short)

    missing = tmp_path / "missing.csv"
    with open(missing, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["virgin_pp", "recycled", "filler"])
        writer.writerow([0.5, 0.3, 0.2])
    with pytest.raises(SchemaError):
        oracle.build_data_oracle(missing)

    X5, metrics5 = _synthetic_dataset(5, seed=1)
    garbled = tmp_path / "garbled.csv"
    write_experiment_csv(garbled, X5, metrics5)
    text = garbled.read_text().replace("0.", "zero.", 1)
    garbled.write_text(text)
    with pytest.raises(SchemaError):
        oracle.build_data_oracle(garbled)

    with pytest.raises(InvalidInput):
        oracle.build_data_oracle(short, validation="bootstrap")


def test_data_oracle_noise_and_validation_args(tmp_path):
    X, metrics = _synthetic_dataset(12, seed=3)
    path = tmp_path / "noise.csv"
    write_experiment_csv(path, X, metrics)
    fitted, _ = oracle.build_data_oracle(
        path, noise_std=0.1, restarts=2, seed=0
    )
    recipe = domain.MixtureRecipe.from_array(X[0])
    a = oracle.query(fitted, recipe, noise_key=1)
    b = oracle.query(fitted, recipe, noise_key=1)
    assert a == b
    with pytest.raises(InvalidInput):
        oracle.build_data_oracle(path, train_fraction=1.5)
