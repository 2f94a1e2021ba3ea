"""Feature schemas, cohort containers, CSV ingestion and the synthetic generator.

The generator drives every feature of a patient from one AR(1) latent path
``z_t``. A feature with loading ``lam`` sees ``lam * z_t + sqrt(1 - lam**2) * eta``,
so the same-time correlation of two non-log numeric features is exactly
``lam_i * lam_j``. That product is the ground truth the fidelity probes are
checked against.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (ConfigurationError, ContractError, DegenerateFeatureError,
                     IngestionError)

DATASET_IDS = ("art_hiv", "hypotension", "custom")
TIME_UNITS = ("month", "hour")


@dataclass(frozen=True)
class NumericFeature:
    name: str
    unit: str = ""
    log_scale: bool = False


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ConfigurationError(f"categorical feature {self.name!r} has no levels")
        if len(set(self.levels)) != len(self.levels):
            raise ConfigurationError(f"duplicate level labels in {self.name!r}")


@dataclass(frozen=True)
class FeatureSchema:
    dataset_id: str
    numeric_features: tuple[NumericFeature, ...]
    categorical_features: tuple[CategoricalFeature, ...]
    sequence_length: int
    time_unit: str

    def __post_init__(self):
        object.__setattr__(self, "numeric_features", tuple(self.numeric_features))
        object.__setattr__(self, "categorical_features", tuple(self.categorical_features))
        if self.dataset_id not in DATASET_IDS:
            raise ConfigurationError(f"unknown dataset_id {self.dataset_id!r}")
        if self.time_unit not in TIME_UNITS:
            raise ConfigurationError(f"unknown time_unit {self.time_unit!r}")
        if self.sequence_length < 2:
            raise ConfigurationError("sequence_length must be at least 2")
        names = self.feature_names
        if len(set(names)) != len(names):
            raise ConfigurationError("feature names must be unique within a schema")
        if not names:
            raise ConfigurationError("schema has no features")

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.numeric_features] + [f.name for f in self.categorical_features]

    @property
    def numeric_names(self) -> list[str]:
        return [f.name for f in self.numeric_features]

    @property
    def categorical_names(self) -> list[str]:
        return [f.name for f in self.categorical_features]

    @property
    def n_numeric(self) -> int:
        return len(self.numeric_features)

    @property
    def level_counts(self) -> list[int]:
        return [len(f.levels) for f in self.categorical_features]

    @property
    def encoded_dim(self) -> int:
        """Width of one encoded visit: numeric + one-hot blocks + the gap channel."""
        return self.n_numeric + sum(self.level_counts) + 1

    def is_numeric(self, name: str) -> bool:
        return name in self.numeric_names

    def feature(self, name: str):
        for f in (*self.numeric_features, *self.categorical_features):
            if f.name == name:
                return f
        raise ConfigurationError(f"no feature named {name!r}")

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "numeric_features": [{"name": f.name, "unit": f.unit, "log_scale": f.log_scale}
                                 for f in self.numeric_features],
            "categorical_features": [{"name": f.name, "levels": list(f.levels)}
                                     for f in self.categorical_features],
            "sequence_length": self.sequence_length,
            "time_unit": self.time_unit,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        try:
            return cls(
                dataset_id=d.get("dataset_id", "custom"),
                numeric_features=tuple(NumericFeature(f["name"], f.get("unit", ""),
                                                      bool(f.get("log_scale", False)))
                                       for f in d.get("numeric_features", [])),
                categorical_features=tuple(CategoricalFeature(f["name"], tuple(f["levels"]))
                                           for f in d.get("categorical_features", [])),
                sequence_length=int(d["sequence_length"]),
                time_unit=d.get("time_unit", "month"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed schema document: {exc}") from exc


_ART = FeatureSchema(
    dataset_id="art_hiv",
    numeric_features=(
        NumericFeature("Viral load", "copies/mL", log_scale=True),
        NumericFeature("CD4 count", "cells/µL"),
    ),
    categorical_features=(
        CategoricalFeature("Base combo", ("FTC + TDF", "3TC + ABC", "FTC + TAF",
                                          "DRV + FTC + TDF", "FTC + RTVB + TDF", "Other")),
        CategoricalFeature("Comp. INI", ("DTG", "RAL", "EVG", "Not applied")),
        CategoricalFeature("Extra PI", ("DRV", "RTVB", "LPV", "RTV", "ATV", "Not applied")),
    ),
    sequence_length=60,
    time_unit="month",
)

_HYPOTENSION = FeatureSchema(
    dataset_id="hypotension",
    numeric_features=(
        NumericFeature("MAP", "mmHg"),
        NumericFeature("Urine", "mL", log_scale=True),
        NumericFeature("Lactate", "mmol/L"),
    ),
    categorical_features=(
        CategoricalFeature("Vasopressors", ("0", "(0, 8.4)", "[8.4, 20.28)", ">=20.28")),
        CategoricalFeature("Fluid boluses", ("[0, 250)", "[250, 500)", "[500, 1000)", ">=1000")),
    ),
    sequence_length=48,
    time_unit="hour",
)


def make_schema(dataset_id: str) -> FeatureSchema:
    """Return the fixed schema of a shipped dataset (``art_hiv`` or ``hypotension``)."""
    if dataset_id == "art_hiv":
        return _ART
    if dataset_id == "hypotension":
        return _HYPOTENSION
    raise ConfigurationError(f"unknown dataset id {dataset_id!r}; expected 'art_hiv' or 'hypotension'")


@dataclass(frozen=True)
class PatientTrajectory:
    patient_id: str
    numeric_values: np.ndarray  # (sequence_length, n_numeric)
    categorical_values: np.ndarray  # (sequence_length, n_categorical), level indices


@dataclass(frozen=True)
class Cohort:
    schema: FeatureSchema
    patients: tuple[PatientTrajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ContractError("patient ids must be unique")
        s = self.schema
        for p in self.patients:
            if p.numeric_values.shape != (s.sequence_length, s.n_numeric):
                raise ContractError(f"patient {p.patient_id}: numeric block has shape "
                                    f"{p.numeric_values.shape}")
            if p.categorical_values.shape != (s.sequence_length, len(s.categorical_features)):
                raise ContractError(f"patient {p.patient_id}: categorical block has shape "
                                    f"{p.categorical_values.shape}")
            if not np.all(np.isfinite(p.numeric_values)):
                raise ContractError(f"patient {p.patient_id}: missing or non-finite values")
            for j, k in enumerate(s.level_counts):
                col = p.categorical_values[:, j]
                if col.size and (col.min() < 0 or col.max() >= k):
                    raise ContractError(f"patient {p.patient_id}: invalid level index")

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def index_of(self) -> dict[str, int]:
        return {p.patient_id: i for i, p in enumerate(self.patients)}

    def numeric_array(self) -> np.ndarray:
        """Stacked numeric values, shape ``(N, T, n_numeric)``."""
        s = self.schema
        if not self.patients:
            return np.zeros((0, s.sequence_length, s.n_numeric))
        return np.stack([p.numeric_values for p in self.patients])

    def categorical_array(self) -> np.ndarray:
        s = self.schema
        if not self.patients:
            return np.zeros((0, s.sequence_length, len(s.categorical_features)), dtype=np.int64)
        return np.stack([p.categorical_values for p in self.patients])

    def subset(self, patient_ids: Iterable[str]) -> "Cohort":
        idx = self.index_of()
        return Cohort(self.schema, tuple(self.patients[idx[pid]] for pid in patient_ids))


# ---------------------------------------------------------------------------
# CSV


def _format_number(x: float) -> str:
    return repr(float(x))


def write_cohort_csv(cohort: Cohort, path) -> None:
    """Write the canonical trajectory CSV (UTF-8, LF, one row per patient-step)."""
    Path(path).write_text(cohort_to_csv(cohort), encoding="utf-8", newline="")


def cohort_to_csv(cohort: Cohort) -> str:
    s = cohort.schema
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", "step", *s.numeric_names, *s.categorical_names])
    levels = [f.levels for f in s.categorical_features]
    for p in cohort.patients:
        for t in range(s.sequence_length):
            writer.writerow([p.patient_id, t + 1,
                             *(_format_number(v) for v in p.numeric_values[t]),
                             *(levels[j][int(c)] for j, c in enumerate(p.categorical_values[t]))])
    return buf.getvalue()


def load_cohort_csv(path, schema: FeatureSchema) -> Cohort:
    """Parse a trajectory CSV into a :class:`Cohort`.

    Rows are reported 1-based with the header as row 1.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text, newline=""))
    expected = ["patient_id", "step", *schema.numeric_names, *schema.categorical_names]
    try:
        header = next(reader)
    except StopIteration:
        raise IngestionError("empty file", row=1) from None
    if header != expected:
        raise IngestionError(f"header mismatch: expected {expected}, got {header}", row=1)
    T = schema.sequence_length
    n_num = schema.n_numeric
    lookups = [{lab: i for i, lab in enumerate(f.levels)} for f in schema.categorical_features]
    order: list[str] = []
    num: dict[str, np.ndarray] = {}
    cat: dict[str, np.ndarray] = {}
    seen: dict[str, np.ndarray] = {}
    for rowno, row in enumerate(reader, start=2):
        if len(row) != len(expected):
            raise IngestionError(f"wrong column count: expected {len(expected)}, got {len(row)}",
                                 row=rowno)
        pid = row[0]
        if not pid:
            raise IngestionError("empty patient_id", row=rowno, column="patient_id")
        try:
            step = int(row[1])
        except ValueError:
            raise IngestionError(f"non-integer step {row[1]!r}", row=rowno, column="step") from None
        if not 1 <= step <= T:
            raise IngestionError(f"step {step} outside 1..{T}", row=rowno, column="step")
        if pid not in num:
            order.append(pid)
            num[pid] = np.zeros((T, n_num))
            cat[pid] = np.zeros((T, len(lookups)), dtype=np.int64)
            seen[pid] = np.zeros(T, dtype=bool)
        if seen[pid][step - 1]:
            raise IngestionError(f"duplicate step {step} for patient {pid!r}", row=rowno, column="step")
        seen[pid][step - 1] = True
        for j, name in enumerate(schema.numeric_names):
            cell = row[2 + j]
            try:
                value = float(cell)
            except ValueError:
                raise IngestionError(f"non-numeric value {cell!r}", row=rowno, column=name) from None
            if not math.isfinite(value):
                raise IngestionError(f"non-finite value {cell!r}", row=rowno, column=name)
            num[pid][step - 1, j] = value
        for j, name in enumerate(schema.categorical_names):
            cell = row[2 + n_num + j]
            if cell not in lookups[j]:
                raise IngestionError(f"unknown level {cell!r}", row=rowno, column=name)
            cat[pid][step - 1, j] = lookups[j][cell]
    for pid in order:
        if not seen[pid].all():
            missing = int(np.flatnonzero(~seen[pid])[0]) + 1
            raise IngestionError(f"missing step {missing} for patient {pid!r}", column="step")
    return Cohort(schema, tuple(PatientTrajectory(pid, num[pid], cat[pid]) for pid in order))


# ---------------------------------------------------------------------------
# synthetic generator


def calibrate_numeric(median: float, q1: float, q3: float, log_scale: bool) -> tuple[float, float]:
    """(mu, sigma) of a normal (or log-normal) matching a median and an IQR width."""
    if log_scale:
        median, q1, q3 = math.log(median), math.log(q1), math.log(q3)
    return median, (q3 - q1) / (2 * 0.6744897501960817)


@dataclass
class GeneratorSpec:
    schema: FeatureSchema
    n_patients: int
    rho: float
    loadings: dict[str, float]
    numeric_params: dict[str, tuple[float, float]]
    categorical_cutpoints: dict[str, tuple[float, ...]]
    targets: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = self.schema
        if self.n_patients < 1:
            raise ConfigurationError("n_patients must be at least 1")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1), got {self.rho}")
        for name in s.feature_names:
            lam = self.loadings.get(name)
            if lam is None:
                raise ConfigurationError(f"missing loading for feature {name!r}")
            if not -1.0 <= lam <= 1.0:
                raise ConfigurationError(f"loading for {name!r} must lie in [-1, 1]")
        for name in s.numeric_names:
            if name not in self.numeric_params:
                raise ConfigurationError(f"missing numeric_params for {name!r}")
            mu, sigma = self.numeric_params[name]
            if not sigma > 0:
                raise ConfigurationError(f"sigma for {name!r} must be positive")
        for f in s.categorical_features:
            probs = self.categorical_cutpoints.get(f.name)
            if probs is None:
                raise ConfigurationError(f"missing level probabilities for {f.name!r}")
            if len(probs) != len(f.levels):
                raise ConfigurationError(f"{f.name!r}: {len(probs)} probabilities for "
                                         f"{len(f.levels)} levels")
            if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
                raise ConfigurationError(f"{f.name!r}: level probabilities must be "
                                         "nonnegative and sum to 1")

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "n_patients": self.n_patients,
            "rho": self.rho,
            "loadings": dict(self.loadings),
            "numeric_params": {k: {"mu": v[0], "sigma": v[1]} for k, v in self.numeric_params.items()},
            "categorical_probs": {k: list(v) for k, v in self.categorical_cutpoints.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping, base: "GeneratorSpec | None" = None) -> "GeneratorSpec":
        """Build a spec from a JSON-like document.

        ``schema`` may be a dataset id or a full schema document. Fields that are
        absent fall back to ``base`` or, for shipped datasets, the Table 1
        calibration defaults.
        """
        schema_doc = d.get("schema", base.schema.dataset_id if base else None)
        if schema_doc is None:
            raise ConfigurationError("generator spec needs a schema")
        if isinstance(schema_doc, str):
            schema = make_schema(schema_doc)
            if base is None:
                base = default_generator_spec(schema_doc)
        else:
            schema = FeatureSchema.from_dict(schema_doc)
        loadings = dict(base.loadings) if base else {}
        numeric = dict(base.numeric_params) if base else {}
        cuts = dict(base.categorical_cutpoints) if base else {}
        loadings.update({k: float(v) for k, v in d.get("loadings", {}).items()})
        for name, p in d.get("numeric_params", {}).items():
            numeric[name] = (float(p["mu"]), float(p["sigma"]))
        for name, t in d.get("targets", {}).items():
            feat = schema.feature(name)
            numeric[name] = calibrate_numeric(t["median"], t["q1"], t["q3"], feat.log_scale)
        for name, probs in d.get("categorical_probs", {}).items():
            cuts[name] = tuple(float(x) for x in probs)
        return cls(
            schema=schema,
            n_patients=int(d.get("n_patients", base.n_patients if base else 0)),
            rho=float(d.get("rho", base.rho if base else 0.0)),
            loadings=loadings,
            numeric_params=numeric,
            categorical_cutpoints=cuts,
            targets=dict(d.get("targets", base.targets if base else {})),
        )


def _normalize_shares(shares: Sequence[float]) -> tuple[float, ...]:
    total = float(sum(shares))
    return tuple(float(x) / total for x in shares)


def load_calibration(dataset_id: str) -> dict:
    """Read the shipped calibration document for a dataset."""
    if dataset_id not in ("art_hiv", "hypotension"):
        raise ConfigurationError(f"no calibration shipped for {dataset_id!r}")
    text = resources.files("trajprobe.data").joinpath(f"{dataset_id}.json").read_text(encoding="utf-8")
    return json.loads(text)


def default_generator_spec(dataset_id: str, n_patients: int | None = None) -> GeneratorSpec:
    """Generator spec calibrated to the Table 1 medians, IQRs and level shares."""
    doc = load_calibration(dataset_id)
    schema = make_schema(dataset_id)
    numeric = {}
    for f in schema.numeric_features:
        t = doc["targets"][f.name]
        numeric[f.name] = calibrate_numeric(t["median"], t["q1"], t["q3"], f.log_scale)
    cuts = {name: _normalize_shares(shares) for name, shares in doc["level_shares"].items()}
    return GeneratorSpec(
        schema=schema,
        n_patients=int(n_patients if n_patients is not None else doc["n_patients"]),
        rho=float(doc["rho"]),
        loadings={k: float(v) for k, v in doc["loadings"].items()},
        numeric_params=numeric,
        categorical_cutpoints=cuts,
        targets=doc["targets"],
    )


def patient_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based substream for ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


def _generate_patient(spec: GeneratorSpec, seed: int, index: int):
    s = spec.schema
    T = s.sequence_length
    rng = patient_rng(seed, index)
    z = np.empty(T)
    z[0] = rng.standard_normal()
    eps = rng.standard_normal(T - 1)
    keep = math.sqrt(1.0 - spec.rho ** 2)
    for t in range(1, T):
        z[t] = spec.rho * z[t - 1] + keep * eps[t - 1]
    eta = rng.standard_normal((T, len(s.feature_names)))

    num = np.empty((T, s.n_numeric))
    for j, f in enumerate(s.numeric_features):
        lam = spec.loadings[f.name]
        mu, sigma = spec.numeric_params[f.name]
        x = mu + sigma * (lam * z + math.sqrt(1.0 - lam * lam) * eta[:, j])
        num[:, j] = np.exp(x) if f.log_scale else x
    cat = np.empty((T, len(s.categorical_features)), dtype=np.int64)
    for j, f in enumerate(s.categorical_features):
        lam = spec.loadings[f.name]
        u = ndtr(lam * z + math.sqrt(1.0 - lam * lam) * eta[:, s.n_numeric + j])
        cum = np.cumsum(spec.categorical_cutpoints[f.name])[:-1]
        cat[:, j] = np.minimum(np.searchsorted(cum, u, side="right"), len(f.levels) - 1)
    return num, cat


def generate_synthetic_cohort(spec: GeneratorSpec, seed: int) -> Cohort:
    """Draw ``spec.n_patients`` trajectories; patient ``i`` uses substream ``(seed, i)``."""
    spec.validate()
    patients = []
    for i in range(spec.n_patients):
        num, cat = _generate_patient(spec, seed, i)
        patients.append(PatientTrajectory(f"P{i:06d}", num, cat))
    return Cohort(spec.schema, tuple(patients))


@dataclass(frozen=True)
class AssociationEstimate:
    value: float
    stderr: float
    method: str  # "analytic" or "monte_carlo"
    n_samples: int = 0
    seed: int | None = None


def analytic_association(spec: GeneratorSpec, feature_i: str, feature_j: str,
                         n_replicates: int = 20, n_patients: int = 200,
                         seed: int = 12345) -> AssociationEstimate:
    """Ground-truth same-time association between two generated features.

    Two non-log numeric features give the closed form ``lam_i * lam_j``. Any
    other pair is estimated by Monte-Carlo over ``n_replicates`` independent
    cohorts of ``n_patients`` patients, using the same measure as the fidelity
    probes.
    """
    s = spec.schema
    fi, fj = s.feature(feature_i), s.feature(feature_j)
    if isinstance(fi, NumericFeature) and isinstance(fj, NumericFeature) \
            and not fi.log_scale and not fj.log_scale:
        value = spec.loadings[feature_i] * spec.loadings[feature_j]
        if feature_i == feature_j:
            value = 1.0
        return AssociationEstimate(value, 0.0, "analytic")

    from .fidelity import Undefined, association, column_of

    mc = GeneratorSpec(s, n_patients, spec.rho, spec.loadings, spec.numeric_params,
                       spec.categorical_cutpoints)
    values = []
    for r in range(n_replicates):
        cohort = generate_synthetic_cohort(mc, seed + r)
        a = association(column_of(cohort, feature_i), column_of(cohort, feature_j))
        if not isinstance(a, Undefined):
            values.append(a.value)
    if not values:
        return AssociationEstimate(float("nan"), float("nan"), "monte_carlo", 0, seed)
    arr = np.asarray(values)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else float("nan")
    return AssociationEstimate(float(arr.mean()), se, "monte_carlo",
                               n_replicates * n_patients * s.sequence_length, seed)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Per numeric feature z-scoring (on the log scale for log-scaled features)."""

    names: list[str] = field(default_factory=list)
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    log_scale: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.means is not None

    def _require(self):
        if not self.fitted:
            raise ContractError("normalizer has not been fitted")

    def _to_model_scale(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.log_scale.any():
            if np.any(values[..., self.log_scale] <= 0):
                raise ContractError("log-scaled feature needs positive values")
            values = values.copy()
            values[..., self.log_scale] = np.log(values[..., self.log_scale])
        return values

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Z-score a ``(..., n_numeric)`` array of schema-unit values."""
        self._require()
        return (self._to_model_scale(values) - self.means) / self.stds

    def inverse(self, z: np.ndarray) -> np.ndarray:
        self._require()
        x = np.asarray(z, dtype=np.float64) * self.stds + self.means
        if self.log_scale.any():
            x = x.copy()
            x[..., self.log_scale] = np.exp(x[..., self.log_scale])
        return x

    def to_dict(self) -> dict:
        self._require()
        return {"names": list(self.names), "means": self.means.tolist(),
                "stds": self.stds.tolist(), "log_scale": self.log_scale.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalizer":
        return cls(list(d["names"]), np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["stds"], dtype=np.float64), np.asarray(d["log_scale"], dtype=bool))


def fit_normalizer(cohort: Cohort, patient_ids: Iterable[str], window: tuple[int, int]) -> Normalizer:
    """Fit means and population stds on ``patient_ids`` over steps ``window`` (1-based, inclusive)."""
    s = cohort.schema
    start, end = window
    if not 1 <= start <= end <= s.sequence_length:
        raise ContractError(f"window {window} outside 1..{s.sequence_length}")
    idx = cohort.index_of()
    ids = list(patient_ids)
    if not ids:
        raise ContractError("no patients to fit on")
    block = np.stack([cohort.patients[idx[pid]].numeric_values[start - 1:end] for pid in ids])
    block = block.reshape(-1, s.n_numeric)
    log_flags = np.array([f.log_scale for f in s.numeric_features], dtype=bool)
    probe = Normalizer(s.numeric_names, np.zeros(s.n_numeric), np.ones(s.n_numeric), log_flags)
    scaled = probe._to_model_scale(block)
    for j, name in enumerate(s.numeric_names):
        if np.unique(scaled[:, j]).size < 2:
            raise DegenerateFeatureError(f"feature {name!r} has zero variance in the fit window")
    return Normalizer(s.numeric_names, scaled.mean(axis=0), scaled.std(axis=0), log_flags)


def apply_normalizer(normalizer: Normalizer, value: float, feature: str) -> float:
    normalizer._require()
    try:
        j = normalizer.names.index(feature)
    except ValueError:
        raise ContractError(f"normalizer has no feature {feature!r}") from None
    x = value
    if normalizer.log_scale[j]:
        if x <= 0:
            raise ContractError("log-scaled feature needs positive values")
        x = math.log(x)
    return (x - normalizer.means[j]) / normalizer.stds[j]
