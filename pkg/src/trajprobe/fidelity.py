"""Distributional and correlational fidelity of synthesized prediction windows.

Marginals: two-sample KS for numeric features, total variation for
categorical ones. Associations pool every patient-step of a window and use
Pearson r (numeric-numeric), the correlation ratio eta (numeric-categorical)
and bias-uncorrected Cramer's V (categorical-categorical). A tile is
undefined when a categorical side shows a single level or a numeric side has
zero variance.

Sums go through ``math.fsum`` so results do not depend on patient order.
"""

from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .cohort import Cohort, FeatureSchema
from .errors import ContractError, ShapeError

N_BINS = 20


class Undefined(NamedTuple):
    reason: str


class Association(NamedTuple):
    value: float
    measure: str  # pearson | eta | cramers_v


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # numeric | categorical
    values: np.ndarray


def _fsum(a: np.ndarray) -> float:
    return math.fsum(np.asarray(a, dtype=np.float64).ravel())


# ---------------------------------------------------------------------------
# marginals


def ecdf(sample: np.ndarray, points: np.ndarray) -> np.ndarray:
    s = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    return np.searchsorted(s, points, side="right") / s.size


def ks_statistic(a, b) -> float:
    """Largest gap between the two empirical CDFs, checked at every pooled value."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("ks_statistic needs two nonempty samples")
    pooled = np.unique(np.concatenate([a, b]))
    return float(np.max(np.abs(ecdf(a, pooled) - ecdf(b, pooled))))


def tv_distance(p_counts, q_counts) -> float:
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"level sets differ: {p.shape} vs {q.shape}")
    tp, tq = _fsum(p), _fsum(q)
    if tp <= 0 or tq <= 0:
        raise ContractError("tv_distance needs positive totals")
    return 0.5 * _fsum(np.abs(p / tp - q / tq))


# ---------------------------------------------------------------------------
# associations


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - _fsum(x) / x.size
    dy = y - _fsum(y) / y.size
    r = _fsum(dx * dy) / math.sqrt(_fsum(dx * dx) * _fsum(dy * dy))
    return max(-1.0, min(1.0, r))


def correlation_ratio(values: np.ndarray, groups: np.ndarray) -> float:
    """eta = sqrt(between-group sum of squares / total sum of squares)."""
    grand = _fsum(values) / values.size
    total = _fsum((values - grand) ** 2)
    between = []
    for g in np.unique(groups):
        member = values[groups == g]
        between.append(member.size * (_fsum(member) / member.size - grand) ** 2)
    return min(1.0, math.sqrt(math.fsum(between) / total))


def contingency_table(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Counts over the observed levels of ``x`` (rows) and ``y`` (columns)."""
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((xi.max() + 1, yi.max() + 1), dtype=np.int64)
    np.add.at(table, (xi, yi), 1)
    return table


def cramers_v(x: np.ndarray, y: np.ndarray) -> float:
    table = contingency_table(x, y).astype(np.float64)
    n = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    chi2 = _fsum((table - expected) ** 2 / expected)
    k = min(table.shape) - 1
    return min(1.0, math.sqrt(chi2 / n / k))


def _degenerate(col: Column) -> Undefined | None:
    if col.kind == "categorical":
        if np.unique(col.values).size < 2:
            return Undefined(f"{col.name}: single observed level")
    elif np.all(col.values == col.values.ravel()[0]):
        return Undefined(f"{col.name}: zero variance")
    return None


def association(x: Column, y: Column) -> Association | Undefined:
    """Mixed-type association between two pooled columns."""
    if x.values.shape != y.values.shape:
        raise ShapeError(f"column lengths differ: {x.values.size} vs {y.values.size}")
    if x.values.size < 2:
        raise ContractError("association needs at least 2 observations")
    for col in (x, y):
        bad = _degenerate(col)
        if bad is not None:
            return bad
    xv, yv = x.values.ravel(), y.values.ravel()
    if x.kind == "numeric" and y.kind == "numeric":
        return Association(pearson(xv.astype(float), yv.astype(float)), "pearson")
    if x.kind == "categorical" and y.kind == "categorical":
        return Association(cramers_v(xv, yv), "cramers_v")
    if x.kind == "numeric":
        return Association(correlation_ratio(xv.astype(float), yv), "eta")
    return Association(correlation_ratio(yv.astype(float), xv), "eta")


# ---------------------------------------------------------------------------
# windows and matrices


@dataclass
class WindowValues:
    """Schema-unit values of one analysis window, pooled later across patients."""

    numeric: np.ndarray  # (N, T, n_numeric)
    categorical: np.ndarray  # (N, T, n_categorical)


def window_values(cohort: Cohort, start: int, end: int) -> WindowValues:
    """Steps ``start..end`` (1-based, inclusive) of every patient."""
    return WindowValues(cohort.numeric_array()[:, start - 1:end],
                        cohort.categorical_array()[:, start - 1:end])


def columns(values: WindowValues, schema: FeatureSchema) -> list[Column]:
    """Pooled analysis columns; log-scaled features are analysed on the log scale."""
    cols = []
    for j, f in enumerate(schema.numeric_features):
        v = values.numeric[..., j].ravel().astype(np.float64)
        cols.append(Column(f.name, "numeric", np.log(v) if f.log_scale else v))
    for j, f in enumerate(schema.categorical_features):
        cols.append(Column(f.name, "categorical", values.categorical[..., j].ravel()))
    return cols


def column_of(cohort: Cohort, name: str, start: int = 1, end: int | None = None) -> Column:
    s = cohort.schema
    end = s.sequence_length if end is None else end
    for col in columns(window_values(cohort, start, end), s):
        if col.name == name:
            return col
    raise ContractError(f"no feature named {name!r}")


@dataclass
class AssociationMatrix:
    features: list[str]
    values: np.ndarray  # NaN where undefined
    measures: list[list[str | None]]
    reasons: dict[tuple[int, int], str] = field(default_factory=dict)

    def is_defined(self, i: int, j: int) -> bool:
        return (i, j) not in self.reasons

    def get(self, i: int, j: int) -> float:
        if not self.is_defined(i, j):
            raise ContractError(f"tile ({self.features[i]}, {self.features[j]}) is undefined: "
                                f"{self.reasons[(i, j)]}")
        return float(self.values[i, j])

    def to_dict(self) -> dict:
        n = len(self.features)
        return {
            "features": list(self.features),
            "values": [[None if not self.is_defined(i, j) else float(self.values[i, j])
                        for j in range(n)] for i in range(n)],
            "measures": [list(r) for r in self.measures],
            "undefined": [{"row": self.features[i], "column": self.features[j], "reason": r}
                          for (i, j), r in sorted(self.reasons.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssociationMatrix":
        names = list(d["features"])
        pos = {n: i for i, n in enumerate(names)}
        vals = np.array([[np.nan if v is None else v for v in row] for row in d["values"]],
                        dtype=np.float64).reshape(len(names), len(names))
        reasons = {(pos[u["row"]], pos[u["column"]]): u["reason"] for u in d.get("undefined", [])}
        return cls(names, vals, [list(r) for r in d["measures"]], reasons)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", *self.features])
        for i, name in enumerate(self.features):
            w.writerow([name, *("" if not self.is_defined(i, j) else repr(float(self.values[i, j]))
                                for j in range(len(self.features)))])
        return buf.getvalue()


def association_matrix(values: WindowValues, schema: FeatureSchema) -> AssociationMatrix:
    """Fill every feature pair; the upper triangle is mirrored so the matrix is symmetric."""
    cols = columns(values, schema)
    if cols and cols[0].values.size == 0:
        raise ContractError("analysis window is empty")
    n = len(cols)
    vals = np.full((n, n), np.nan)
    measures: list[list[str | None]] = [[None] * n for _ in range(n)]
    reasons: dict[tuple[int, int], str] = {}
    for i in range(n):
        for j in range(i, n):
            if i == j:
                bad = _degenerate(cols[i])
                res = bad if bad is not None else Association(
                    1.0, "pearson" if cols[i].kind == "numeric" else "cramers_v")
            else:
                res = association(cols[i], cols[j])
            for a, b in ((i, j), (j, i)):
                if isinstance(res, Undefined):
                    reasons[(a, b)] = res.reason
                else:
                    vals[a, b] = res.value
                    measures[a][b] = res.measure
    return AssociationMatrix([c.name for c in cols], vals, measures, reasons)


def correlation_gap(real: AssociationMatrix, synth: AssociationMatrix) -> float | None:
    """Mean |real - synth| over off-diagonal tiles defined in both matrices."""
    if real.features != synth.features:
        raise ContractError("matrices cover different features")
    diffs = []
    n = len(real.features)
    for i in range(n):
        for j in range(i + 1, n):
            if real.is_defined(i, j) and synth.is_defined(i, j):
                diffs.append(abs(real.get(i, j) - synth.get(i, j)))
    return math.fsum(diffs) / len(diffs) if diffs else None


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class MarginalMetric:
    feature: str
    kind: str  # ks | tv
    value: float
    n_real: int
    n_synthetic: int


@dataclass
class FidelityReport:
    dataset_id: str
    model_id: str
    g_max: int | None
    marginals: list[MarginalMetric]
    real: AssociationMatrix
    synthetic: AssociationMatrix
    correlation_gap: float | None
    histograms: dict
    provenance: dict = field(default_factory=dict)

    def marginal(self, feature: str) -> MarginalMetric:
        for m in self.marginals:
            if m.feature == feature:
                return m
        raise KeyError(feature)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "model_id": self.model_id,
            "g_max": self.g_max,
            "marginals": [{"feature": m.feature, "kind": m.kind, "value": m.value,
                           "n_real": m.n_real, "n_synthetic": m.n_synthetic} for m in self.marginals],
            "association_real": self.real.to_dict(),
            "association_synthetic": self.synthetic.to_dict(),
            "correlation_gap": self.correlation_gap,
            "histograms": self.histograms,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FidelityReport":
        return cls(
            dataset_id=d["dataset_id"], model_id=d["model_id"], g_max=d["g_max"],
            marginals=[MarginalMetric(m["feature"], m["kind"], m["value"], m["n_real"],
                                      m["n_synthetic"]) for m in d["marginals"]],
            real=AssociationMatrix.from_dict(d["association_real"]),
            synthetic=AssociationMatrix.from_dict(d["association_synthetic"]),
            correlation_gap=d["correlation_gap"], histograms=d["histograms"],
            provenance=d.get("provenance", {}),
        )


def _histograms(real_cols: Sequence[Column], synth_cols: Sequence[Column], schema: FeatureSchema) -> dict:
    out = {}
    for rc, sc in zip(real_cols, synth_cols):
        if rc.kind == "numeric":
            lo = float(min(rc.values.min(), sc.values.min()))
            hi = float(max(rc.values.max(), sc.values.max()))
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, N_BINS + 1)
            f = schema.feature(rc.name)
            out[rc.name] = {
                "kind": "numeric", "scale": "log" if f.log_scale else "linear",
                "edges": [float(e) for e in edges],
                "real": np.histogram(rc.values, edges)[0].tolist(),
                "synthetic": np.histogram(sc.values, edges)[0].tolist(),
            }
        else:
            levels = list(schema.feature(rc.name).levels)
            out[rc.name] = {
                "kind": "categorical", "levels": levels,
                "real": np.bincount(rc.values, minlength=len(levels)).tolist(),
                "synthetic": np.bincount(sc.values, minlength=len(levels)).tolist(),
            }
    return out


def fidelity_report(real: WindowValues, synthetic: WindowValues, schema: FeatureSchema,
                    meta: dict | None = None) -> FidelityReport:
    """Score synthesized prediction windows against the real held-out windows."""
    meta = dict(meta or {})
    if real.numeric.shape[0] == 0 or synthetic.numeric.shape[0] == 0:
        raise ContractError("both sides need at least one patient")
    rcols, scols = columns(real, schema), columns(synthetic, schema)
    marginals = []
    for rc, sc in zip(rcols, scols):
        if rc.kind == "numeric":
            value = ks_statistic(rc.values, sc.values)
            kind = "ks"
        else:
            k = len(schema.feature(rc.name).levels)
            value = tv_distance(np.bincount(rc.values, minlength=k), np.bincount(sc.values, minlength=k))
            kind = "tv"
        marginals.append(MarginalMetric(rc.name, kind, value, int(rc.values.size), int(sc.values.size)))
    real_m = association_matrix(real, schema)
    synth_m = association_matrix(synthetic, schema)
    return FidelityReport(
        dataset_id=meta.pop("dataset_id", schema.dataset_id),
        model_id=meta.pop("model_id", "unknown"),
        g_max=meta.pop("g_max", None),
        marginals=marginals,
        real=real_m,
        synthetic=synth_m,
        correlation_gap=correlation_gap(real_m, synth_m),
        histograms=_histograms(rcols, scols, schema),
        provenance=meta.pop("provenance", meta),
    )
