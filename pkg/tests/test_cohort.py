import math

import numpy as np
import pytest

from trajprobe.cohort import (GeneratorSpec, analytic_association, apply_normalizer, cohort_to_csv,
                              default_generator_spec, fit_normalizer, generate_synthetic_cohort,
                              load_cohort_csv, make_schema, write_cohort_csv)
from trajprobe.errors import (ConfigurationError, ContractError, DegenerateFeatureError,
                              IngestionError)

from builders import latent_oracle, random_cohort, small_schema, spec_for


def test_art_schema():
    s = make_schema("art_hiv")
    assert (s.n_numeric, len(s.categorical_features), s.sequence_length, s.time_unit) == (2, 3, 60, "month")
    assert s.feature("Comp. INI").levels == ("DTG", "RAL", "EVG", "Not applied")
    assert s.feature("Base combo").levels == ("FTC + TDF", "3TC + ABC", "FTC + TAF", "DRV + FTC + TDF",
                                              "FTC + RTVB + TDF", "Other")
    assert s.level_counts == [6, 4, 6]
    assert s.feature("Viral load").log_scale


def test_hypotension_schema():
    s = make_schema("hypotension")
    assert (s.n_numeric, len(s.categorical_features), s.sequence_length, s.time_unit) == (3, 2, 48, "hour")
    assert s.level_counts == [4, 4]


def test_unknown_schema():
    with pytest.raises(ConfigurationError):
        make_schema("sepsis")


# ---------------------------------------------------------------- CSV


@pytest.fixture
def art_csv(tmp_path):
    spec = default_generator_spec("art_hiv", 2)
    cohort = generate_synthetic_cohort(spec, seed=3)
    path = tmp_path / "art.csv"
    write_cohort_csv(cohort, path)
    return cohort, path


def test_csv_round_trip(art_csv, tmp_path):
    cohort, path = art_csv
    loaded = load_cohort_csv(path, cohort.schema)
    assert len(loaded) == 2
    for a, b in zip(cohort.patients, loaded.patients):
        assert a.patient_id == b.patient_id
        assert np.array_equal(a.numeric_values, b.numeric_values)
        assert np.array_equal(a.categorical_values, b.categorical_values)
    again = tmp_path / "again.csv"
    write_cohort_csv(loaded, again)
    assert again.read_bytes() == path.read_bytes()
    assert b"\r\n" not in path.read_bytes()


def _mutate(path, fn):
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(fn(lines)), encoding="utf-8", newline="")


def _expect(path, schema, pattern):
    with pytest.raises(IngestionError, match=pattern) as info:
        load_cohort_csv(path, schema)
    return info.value


def test_csv_missing_step(art_csv):
    cohort, path = art_csv
    _mutate(path, lambda ls: ls[:30] + ls[31:])
    _expect(path, cohort.schema, "missing step 30")


def test_csv_unknown_level(art_csv):
    cohort, path = art_csv
    _mutate(path, lambda ls: ls[:5] + [ls[5].replace(ls[5].split(",")[4], "XYZ", 1)] + ls[6:])
    err = _expect(path, cohort.schema, "unknown level 'XYZ'")
    assert err.row == 6 and err.column == "Base combo"


def test_csv_duplicate_step(art_csv):
    cohort, path = art_csv
    _mutate(path, lambda ls: ls[:3] + [ls[2]] + ls[4:])
    assert _expect(path, cohort.schema, "duplicate step").row == 4


def test_csv_non_numeric(art_csv):
    cohort, path = art_csv
    _mutate(path, lambda ls: ls[:2] + [ls[2].replace(ls[2].split(",")[3], "abc", 1)] + ls[3:])
    err = _expect(path, cohort.schema, "non-numeric")
    assert (err.row, err.column) == (3, "CD4 count")


def test_csv_wrong_column_count(art_csv):
    cohort, path = art_csv
    _mutate(path, lambda ls: ls[:7] + [ls[7].rstrip("\n") + ",extra\n"] + ls[8:])
    assert _expect(path, cohort.schema, "column count").row == 8


def test_csv_header_mismatch(art_csv):
    cohort, path = art_csv
    _mutate(path, lambda ls: ["patient_id,step,VL\n"] + ls[1:])
    _expect(path, cohort.schema, "header")


# ---------------------------------------------------------------- generator


def test_generator_is_deterministic():
    spec = default_generator_spec("hypotension", 20)
    a, b = generate_synthetic_cohort(spec, 9), generate_synthetic_cohort(spec, 9)
    assert cohort_to_csv(a) == cohort_to_csv(b)
    assert cohort_to_csv(a) != cohort_to_csv(generate_synthetic_cohort(spec, 10))


def test_patient_streams_do_not_depend_on_cohort_size():
    spec = default_generator_spec("art_hiv", 5)
    small = generate_synthetic_cohort(spec, 1)
    big = generate_synthetic_cohort(default_generator_spec("art_hiv", 50), 1)
    assert np.array_equal(small.patients[4].numeric_values, big.patients[4].numeric_values)


def _pooled(cohort, j):
    return np.concatenate([p.numeric_values[:, j] for p in cohort.patients])


def test_zero_loadings_give_uncorrelated_features():
    schema = small_schema(length=60)
    cohort = generate_synthetic_cohort(spec_for(schema, 1000, {"A": 0, "B": 0, "C": 0}), 0)
    assert abs(np.corrcoef(_pooled(cohort, 0), _pooled(cohort, 1))[0, 1]) < 0.05


def test_unit_loadings_give_perfect_correlation():
    schema = small_schema(length=60)
    cohort = generate_synthetic_cohort(spec_for(schema, 50, {"A": 1, "B": 1, "C": 0}), 0)
    assert abs(np.corrcoef(_pooled(cohort, 0), _pooled(cohort, 1))[0, 1] - 1.0) < 1e-9


def test_product_of_loadings_against_monte_carlo_oracle():
    schema = small_schema(length=60)
    cohort = generate_synthetic_cohort(spec_for(schema, 400, {"A": 0.8, "B": 0.5, "C": 0}), 0)
    got = np.corrcoef(_pooled(cohort, 0), _pooled(cohort, 1))[0, 1]
    rng = np.random.default_rng(2024)
    reps = [np.corrcoef(*(x.ravel() for x in latent_oracle(rng, 400, 60, 0.9, 0.8, 0.5)))[0, 1]
            for _ in range(30)]
    se = np.std(reps, ddof=1)
    assert abs(np.mean(reps) - 0.40) < 3 * se / math.sqrt(len(reps))
    assert abs(got - 0.40) < 3 * se


def test_analytic_association_cases():
    schema = small_schema(length=20)
    spec = spec_for(schema, 10, {"A": 0.8, "B": 0.5, "C": 0.7})
    assert analytic_association(spec, "A", "B").value == pytest.approx(0.40, abs=1e-15)
    zero = spec_for(schema, 10, {"A": 0.0, "B": 0.9, "C": 0.0})
    assert analytic_association(zero, "A", "B").value == 0.0
    one = spec_for(schema, 10, {"A": 1.0, "B": 1.0, "C": 0.0})
    assert analytic_association(one, "A", "B").value == 1.0
    mc = analytic_association(spec, "A", "C", n_replicates=4, n_patients=50)
    assert mc.method == "monte_carlo" and mc.stderr > 0 and 0 < mc.value < 1


@pytest.mark.parametrize("dataset", ["art_hiv", "hypotension"])
def test_generated_medians_fall_inside_target_iqr(dataset):
    spec = default_generator_spec(dataset, 2000)
    cohort = generate_synthetic_cohort(spec, 0)
    for j, name in enumerate(spec.schema.numeric_names):
        t = spec.targets[name]
        assert t["q1"] <= float(np.median(_pooled(cohort, j))) <= t["q3"], name


def test_level_shares_match_cutpoints():
    spec = default_generator_spec("art_hiv", 5000)
    cohort = generate_synthetic_cohort(spec, 1)
    cats = cohort.categorical_array().reshape(-1, 3)
    for j, f in enumerate(spec.schema.categorical_features):
        shares = np.bincount(cats[:, j], minlength=len(f.levels)) / len(cats)
        assert np.all(np.abs(shares - spec.categorical_cutpoints[f.name]) <= 0.02), f.name


def test_lag_one_autocorrelation():
    schema = small_schema(length=60)
    spec = spec_for(schema, 200, {"A": 0.8, "B": 0.3, "C": 0}, rho=0.9)
    est = []
    for seed in range(12):
        x = generate_synthetic_cohort(spec, seed).numeric_array()[:, :, 0]
        est.append(np.corrcoef(x[:, 1:].ravel(), x[:, :-1].ravel())[0, 1])
    se = np.std(est, ddof=1) / math.sqrt(len(est))
    assert abs(np.mean(est) - 0.9 * 0.8 ** 2) < 3 * se


def test_generator_spec_validation():
    schema = small_schema()
    with pytest.raises(ConfigurationError, match="sum to 1"):
        spec_for(schema, 5, {"A": 0, "B": 0, "C": 0}, probs={"C": [0.5, 0.3, 0.3]})
    with pytest.raises(ConfigurationError, match="rho"):
        spec_for(schema, 5, {"A": 0, "B": 0, "C": 0}, rho=1.0)
    with pytest.raises(ConfigurationError, match="loading"):
        spec_for(schema, 5, {"A": 1.5, "B": 0, "C": 0})


def test_generator_spec_json_round_trip():
    spec = default_generator_spec("hypotension", 7)
    again = GeneratorSpec.from_dict(spec.to_dict())
    assert again.numeric_params == spec.numeric_params
    assert again.categorical_cutpoints == spec.categorical_cutpoints
    assert again.loadings == spec.loadings


# ---------------------------------------------------------------- normalizer


def _two_value_cohort(values):
    schema = small_schema(length=2)
    cohort = random_cohort(np.random.default_rng(0), len(values), schema)
    patients = []
    for p, v in zip(cohort.patients, values):
        num = p.numeric_values.copy()
        num[:, 0] = v
        patients.append(type(p)(p.patient_id, num, p.categorical_values))
    return type(cohort)(schema, tuple(patients))


def test_normalizer_examples():
    cohort = _two_value_cohort([0.0, 2.0])
    norm = fit_normalizer(cohort, cohort.patient_ids, (1, 2))
    assert apply_normalizer(norm, 0.0, "A") == -1.0
    assert apply_normalizer(norm, 2.0, "A") == 1.0
    assert apply_normalizer(norm, 1.0, "A") == 0.0
    assert apply_normalizer(norm, 7.0, "A") == 6.0  # unseen value, train statistics


def test_normalizer_uses_only_given_patients_and_window():
    cohort = _two_value_cohort([0.0, 2.0, 1000.0])
    norm = fit_normalizer(cohort, cohort.patient_ids[:2], (1, 1))
    assert norm.means[0] == 1.0 and norm.stds[0] == 1.0


def test_shifted_data_mean_maps_to_zero():
    cohort = random_cohort(np.random.default_rng(1), 10, small_schema())
    norm = fit_normalizer(cohort, cohort.patient_ids, (1, 12))
    z = norm.transform(cohort.numeric_array())
    np.testing.assert_allclose(z.reshape(-1, 2).mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(norm.inverse(z), cohort.numeric_array(), rtol=1e-12, atol=1e-12)


def test_degenerate_feature_rejected():
    cohort = _two_value_cohort([3.0, 3.0])
    with pytest.raises(DegenerateFeatureError):
        fit_normalizer(cohort, cohort.patient_ids, (1, 2))


def test_unfitted_normalizer():
    from trajprobe.cohort import Normalizer
    with pytest.raises(ContractError):
        Normalizer().transform(np.zeros(2))
