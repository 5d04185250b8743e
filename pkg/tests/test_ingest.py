from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from ldpsgd.errors import ConfigurationError, DataError, SchemaError
from ldpsgd.ingest import (
    CLASSIFICATION,
    INSURANCE_SPECS,
    REGRESSION,
    ColumnSpec,
    SplitPlan,
    bin_response_by_quantiles,
    evaluation_points,
    load_and_encode,
    permuted_chunks,
    stream_epochs,
    synthetic_insurance,
    write_synthetic_insurance,
)
from ldpsgd.numerics import RngHandle


@pytest.fixture(scope="module")
def table():
    return synthetic_insurance(5000, RngHandle(0, ("insurance",)))


def test_binning_tie_rule_and_proportions():
    labels, cuts = bin_response_by_quantiles(np.arange(1.0, 101.0), (0.33, 0.66))
    np.testing.assert_allclose(cuts, np.quantile(np.arange(1.0, 101.0), [0.33, 0.66]))
    assert np.bincount(labels).tolist() == [33, 33, 34]
    lab, _ = bin_response_by_quantiles(np.array([1.0, 2.0, 3.0]), (0.5,))
    # the value equal to the cut point takes the lower label
    assert lab.tolist() == [0, 0, 1]
    with pytest.raises(ConfigurationError):
        bin_response_by_quantiles([1.0, 2.0], (0.6, 0.3))


def test_schema_and_data_errors(table):
    with pytest.raises(SchemaError):
        load_and_encode(table.drop(columns=["bmi"]))
    bad = table.copy()
    bad.loc[17, "occupation"] = "Astronaut"
    with pytest.raises(DataError) as info:
        load_and_encode(bad)
    assert info.value.row == 17 and info.value.value == "Astronaut"
    bad = table.copy()
    bad["age"] = bad["age"].astype(object)
    bad.loc[3, "age"] = "old"
    with pytest.raises(DataError):
        load_and_encode(bad)
    with pytest.raises(ConfigurationError):
        ColumnSpec("smoker", "binary", {"no": 0, "yes": 2})
    with pytest.raises(ConfigurationError):
        SplitPlan(train_fraction=1.0)


def test_encoding_layout(table):
    ds = load_and_encode(table, task=CLASSIFICATION)
    assert ds.feature_names[0] == "intercept"
    assert ds.n_features == 12 and ds.n_classes == 3
    assert np.all(ds.X_train[:, 0] == 1)
    age = ds.feature_names.index("age")
    assert abs(ds.X_train[:, age].mean()) < 1e-12
    assert ds.X_train[:, age].std() == pytest.approx(1.0)
    assert len(ds.y_train) == 4000 and len(ds.y_test) == 1000
    assert set(np.unique(ds.y_train)) == {0, 1, 2}
    np.testing.assert_array_equal(ds.fitted_on, ds.train_index)
    assert not set(ds.train_index) & set(ds.test_index)


def test_no_leakage_from_test_rows(table):
    base = load_and_encode(table)
    poisoned = table.copy()
    poisoned.loc[base.test_index, "charges"] *= 100
    poisoned.loc[base.test_index, "bmi"] += 40
    other = load_and_encode(poisoned)
    np.testing.assert_array_equal(base.cuts, other.cuts)
    assert base.scalers == other.scalers
    np.testing.assert_array_equal(base.X_train, other.X_train)
    np.testing.assert_array_equal(base.y_train, other.y_train)


def test_regression_scaling(table):
    ds = load_and_encode(table, task=REGRESSION)
    mean, sd = ds.response_scale
    raw = table["charges"].to_numpy()[ds.train_index]
    assert mean == pytest.approx(raw.mean()) and sd == pytest.approx(raw.std())
    assert ds.y_train.mean() == pytest.approx(0.0, abs=1e-12)


def test_csv_round_trip_keeps_none_category(tmp_path):
    path = tmp_path / "ins.csv"
    write_synthetic_insurance(path, 800, seed=3)
    assert "None" in pd.read_csv(path, keep_default_na=False)["medical_history"].unique()
    from_file = load_and_encode(path)
    from_frame = load_and_encode(synthetic_insurance(800, RngHandle(3, ("insurance",))))
    np.testing.assert_allclose(from_file.X_train, from_frame.X_train)


def test_stream_epochs_and_callback(table):
    ds = load_and_encode(table)
    seen = []
    rows = list(stream_epochs(ds, SplitPlan(), RngHandle(1), eval_every=1500, callback=seen.append))
    assert len(rows) == 4000
    assert seen == [1500, 3000, 4000]
    assert evaluation_points(4000, 1500).tolist() == seen
    a = np.vstack([c.X for c in permuted_chunks(ds, RngHandle(1))])
    b = np.vstack([c.X for c in permuted_chunks(ds, RngHandle(1))])
    np.testing.assert_array_equal(a, b)
    assert sorted(map(tuple, a)) == sorted(map(tuple, ds.X_train))
    unpermuted = np.vstack([c.X for c in permuted_chunks(ds, RngHandle(1), permute=False)])
    np.testing.assert_array_equal(unpermuted, ds.X_train)


def test_majority_baseline(table):
    ds = load_and_encode(table)
    counts = np.bincount(ds.y_train, minlength=3)
    assert ds.majority_accuracy() == pytest.approx(np.mean(ds.y_test == np.argmax(counts)))


def test_specs_cover_schema(table):
    assert [s.name for s in INSURANCE_SPECS] == list(table.columns)
