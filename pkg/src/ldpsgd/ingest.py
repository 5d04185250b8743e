"""Tabular pipeline for the insurance-charges study.

CSV in, then standardized numeric columns, ordinal/binary codes, a train/test
split and (for classification) a three-way quantile binning of the response.
Every fitted statistic comes from the training rows only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import pandas as pd

from .datagen import CHUNK, Chunk, LabeledExample
from .errors import ConfigurationError, DataError, SchemaError
from .numerics import RngHandle

NUMERIC = "numeric"
ORDINAL = "ordinal"
BINARY = "binary"
RESPONSE = "response"

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str
    mapping: dict | None = None

    def __post_init__(self):
        if self.role not in (NUMERIC, ORDINAL, BINARY, RESPONSE):
            raise ConfigurationError(f"unknown column role {self.role!r}")
        if self.role in (ORDINAL, BINARY) and not self.mapping:
            raise ConfigurationError(f"column {self.name!r} needs a category mapping")
        if self.role == BINARY and sorted(self.mapping.values()) != [0, 1]:
            raise ConfigurationError(f"binary column {self.name!r} must map onto {{0, 1}}")


@dataclass(frozen=True)
class SplitPlan:
    train_fraction: float = 0.8
    seed: int = 0
    permute_epochs: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")


SEVERITY = {"None": 0, "High blood pressure": 1, "Diabetes": 2, "Heart disease": 3}

INSURANCE_SPECS = (
    ColumnSpec("age", NUMERIC),
    ColumnSpec("gender", BINARY, {"female": 0, "male": 1}),
    ColumnSpec("bmi", NUMERIC),
    ColumnSpec("children", NUMERIC),
    ColumnSpec("smoker", BINARY, {"no": 0, "yes": 1}),
    # region codes are arbitrary labels; alphabetical order
    ColumnSpec("region", ORDINAL, {"northeast": 0, "northwest": 1, "southeast": 2, "southwest": 3}),
    ColumnSpec("medical_history", ORDINAL, SEVERITY),
    ColumnSpec("family_medical_history", ORDINAL, SEVERITY),
    ColumnSpec("exercise_frequency", ORDINAL,
               {"Never": 0, "Occasionally": 1, "Rarely": 2, "Frequently": 3}),
    ColumnSpec("occupation", ORDINAL,
               {"Student": 0, "Unemployed": 1, "Blue collar": 2, "White collar": 3}),
    ColumnSpec("coverage_level", ORDINAL, {"Basic": 0, "Standard": 1, "Premium": 2}),
    ColumnSpec("charges", RESPONSE),
)


def bin_response_by_quantiles(values, probs=(0.33, 0.66), fit_values=None):
    """Label each value by the interval of quantile cut points it falls into.

    Cut points use linear interpolation between order statistics (numpy's
    default method) on ``fit_values`` (defaults to ``values``). A value equal to
    a cut point takes the lower label. Returns ``(labels, cuts)``.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or np.any(np.diff(probs) <= 0) or probs[0] <= 0 or probs[-1] >= 1:
        raise ConfigurationError("quantile levels must be strictly increasing inside (0, 1)")
    values = np.asarray(values, dtype=float)
    fit = values if fit_values is None else np.asarray(fit_values, dtype=float)
    if fit.size == 0:
        raise ConfigurationError("cannot bin an empty sample")
    cuts = np.quantile(fit, probs, method="linear")
    labels = np.searchsorted(cuts, values, side="left")
    return labels.astype(int), cuts


@dataclass
class EncodedDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    feature_names: list[str]
    task: str
    train_index: np.ndarray
    test_index: np.ndarray
    scalers: dict = field(default_factory=dict)
    cuts: np.ndarray | None = None
    response_scale: tuple[float, float] | None = None
    fitted_on: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_classes(self) -> int:
        return 3 if self.cuts is None else len(self.cuts) + 1

    def majority_accuracy(self) -> float:
        """Test accuracy of always predicting the most common training label."""
        counts = np.bincount(self.y_train.astype(int), minlength=self.n_classes)
        return float(np.mean(self.y_test == np.argmax(counts)))


def _split(n_rows: int, plan: SplitPlan):
    perm = RngHandle(plan.seed, ("split",)).generator.permutation(n_rows)
    n_train = int(np.floor(plan.train_fraction * n_rows))
    if n_train == 0 or n_train == n_rows:
        raise ConfigurationError("split leaves an empty partition")
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _encode_categorical(col: pd.Series, spec: ColumnSpec) -> np.ndarray:
    codes = col.map(spec.mapping)
    bad = codes.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        value = col.iloc[row]
        raise DataError(f"column {spec.name!r} row {row}: unmapped category {value!r}", row, value)
    return codes.to_numpy(dtype=float)


def load_and_encode(source, specs: Sequence[ColumnSpec] = INSURANCE_SPECS,
                    plan: SplitPlan = SplitPlan(), task: str = CLASSIFICATION,
                    probs=(0.33, 0.66)) -> EncodedDataset:
    """Read a CSV path (or DataFrame) and return encoded train/test arrays.

    A leading intercept column of ones is prepended to the covariates.
    """
    if task not in (REGRESSION, CLASSIFICATION):
        raise ConfigurationError(f"unknown task {task!r}")
    if isinstance(source, pd.DataFrame):
        df = source.reset_index(drop=True)
    else:
        # "None" is a real category of the medical-history columns
        df = pd.read_csv(source, keep_default_na=False)
    missing = [s.name for s in specs if s.name not in df.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    responses = [s for s in specs if s.role == RESPONSE]
    if len(responses) != 1:
        raise ConfigurationError("exactly one response column is required")

    train_idx, test_idx = _split(len(df), plan)
    cols, names, scalers = [], [], {}
    for spec in specs:
        if spec.role == RESPONSE:
            continue
        if spec.role == NUMERIC:
            raw = pd.to_numeric(df[spec.name], errors="coerce").to_numpy(dtype=float)
            if np.isnan(raw).any():
                row = int(np.flatnonzero(np.isnan(raw))[0])
                raise DataError(f"column {spec.name!r} row {row}: not numeric",
                                row, df[spec.name].iloc[row])
            mean = raw[train_idx].mean()
            sd = raw[train_idx].std()
            scalers[spec.name] = (float(mean), float(sd))
            cols.append((raw - mean) / (sd if sd > 0 else 1.0))
        else:
            cols.append(_encode_categorical(df[spec.name], spec))
        names.append(spec.name)
    X = np.column_stack([np.ones(len(df))] + cols)

    resp = pd.to_numeric(df[responses[0].name], errors="coerce").to_numpy(dtype=float)
    if np.isnan(resp).any():
        row = int(np.flatnonzero(np.isnan(resp))[0])
        raise DataError(f"response row {row} is not numeric", row, df[responses[0].name].iloc[row])
    cuts = response_scale = None
    if task == CLASSIFICATION:
        y, cuts = bin_response_by_quantiles(resp, probs, fit_values=resp[train_idx])
    else:
        mean, sd = resp[train_idx].mean(), resp[train_idx].std()
        response_scale = (float(mean), float(sd))
        y = (resp - mean) / sd

    return EncodedDataset(
        X[train_idx], y[train_idx], X[test_idx], y[test_idx], ["intercept"] + names, task,
        train_idx, test_idx, scalers, cuts, response_scale, fitted_on=train_idx.copy(),
    )


def permuted_chunks(dataset: EncodedDataset, rng: RngHandle, chunk: int = CHUNK,
                    permute: bool = True) -> Iterator[Chunk]:
    """One pass over the training rows in a seeded random order."""
    n = len(dataset.y_train)
    order = rng.generator.permutation(n) if permute else np.arange(n)
    for start in range(0, n, chunk):
        idx = order[start:start + chunk]
        yield Chunk(dataset.X_train[idx], dataset.y_train[idx])


def stream_epochs(dataset: EncodedDataset, plan: SplitPlan, rng: RngHandle,
                  eval_every: int = 10_000,
                  callback: Callable[[int], None] | None = None) -> Iterator[LabeledExample]:
    """Yield the training rows once, in an order seeded by ``rng``.

    ``callback(i)`` fires after every ``eval_every``-th example, once the consumer
    has asked for the next item (so example ``i`` has been processed), and once
    more at the end of the pass if it did not already fall on a multiple.
    """
    i = 0
    for chunk in permuted_chunks(dataset, rng, permute=plan.permute_epochs):
        for ex in chunk.examples():
            yield ex
            i += 1
            if callback is not None and i % eval_every == 0:
                callback(i)
    if callback is not None and i % eval_every != 0:
        callback(i)


def evaluation_points(n: int, eval_every: int) -> np.ndarray:
    pts = list(range(eval_every, n + 1, eval_every))
    if not pts or pts[-1] != n:
        pts.append(n)
    return np.asarray(pts, dtype=np.int64)


# -- synthetic table with the insurance schema ----------------------------------

def synthetic_insurance(n_rows: int, rng: RngHandle) -> pd.DataFrame:
    """Seeded table with the insurance schema and a charges column driven by the covariates."""
    g = rng.generator
    age = g.integers(18, 66, n_rows)
    gender = g.choice(["female", "male"], n_rows)
    bmi = np.round(np.clip(g.normal(30.0, 6.0, n_rows), 15.0, 55.0), 2)
    children = g.integers(0, 6, n_rows)
    smoker = g.choice(["no", "yes"], n_rows, p=[0.7, 0.3])
    region = g.choice(["northeast", "northwest", "southeast", "southwest"], n_rows)
    sev = list(SEVERITY)
    med = g.choice(sev, n_rows)
    fam = g.choice(sev, n_rows)
    exercise = g.choice(["Never", "Occasionally", "Rarely", "Frequently"], n_rows)
    occupation = g.choice(["Student", "Unemployed", "Blue collar", "White collar"], n_rows)
    coverage = g.choice(["Basic", "Standard", "Premium"], n_rows)

    code = lambda arr, mapping: np.vectorize(mapping.get)(arr)
    charges = (
        3000.0
        + 120.0 * age
        + 150.0 * (bmi - 30.0)
        + 400.0 * children
        + 9000.0 * (smoker == "yes")
        + 1500.0 * code(med, SEVERITY)
        + 700.0 * code(fam, SEVERITY)
        - 300.0 * code(exercise, {"Never": 0, "Occasionally": 1, "Rarely": 2, "Frequently": 3})
        + 300.0 * code(occupation, {"Student": 0, "Unemployed": 1, "Blue collar": 2, "White collar": 3})
        + 2500.0 * code(coverage, {"Basic": 0, "Standard": 1, "Premium": 2})
        + g.normal(0.0, 1500.0, n_rows)
    )
    return pd.DataFrame({
        "age": age, "gender": gender, "bmi": bmi, "children": children, "smoker": smoker,
        "region": region, "medical_history": med, "family_medical_history": fam,
        "exercise_frequency": exercise, "occupation": occupation, "coverage_level": coverage,
        "charges": np.round(charges, 2),
    })


def write_synthetic_insurance(path, n_rows: int, seed: int = 0) -> None:
    synthetic_insurance(n_rows, RngHandle(seed, ("insurance",))).to_csv(path, index=False)
