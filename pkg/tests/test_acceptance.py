"""End-to-end acceptance checks, one test per criterion; conftest prints the PASS/FAIL summary."""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from trajprobe import autodiff as ad
from trajprobe.cli import main
from trajprobe.cohort import generate_synthetic_cohort, make_schema
from trajprobe.config import parse_config
from trajprobe.errors import ContractError
from trajprobe.fidelity import (association_matrix, correlation_gap, cramers_v, ks_statistic, tv_distance,
                                window_values)
from trajprobe.models import ModelConfig, attention, build_model, lstm_cell, transformer_block
from trajprobe.optim import AdamState, adam_step
from trajprobe.runner import run_experiment
from trajprobe.sampling import (IrregularitySpec, SplitSpec, complete_visits, draw_gap, dual_split,
                                sample_gaps)

from builders import latent_oracle, random_cohort, small_schema, spec_for
from oracles import brute_force_ks, direct_cramers_v, finite_difference_check, scalar_adam

criterion = pytest.mark.criterion

INSTANCES = 50
FD_RTOL = 1e-4


# ---------------------------------------------------------------- 1


def _fd_families(rng):
    def shape(*dims):
        return rng.normal(size=dims)

    def matmul(_):
        n, k, m = rng.integers(1, 5, size=3)
        return (lambda a, b: ad.tensor_sum(ad.matmul(a, b) * ad.matmul(a, b))), [shape(n, k), shape(k, m)]

    def activations(i):
        kind = ("sigmoid", "tanh", "relu")[i % 3]
        x = shape(3, 4)
        if kind == "relu":
            x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep clear of the kink
        w = shape(3, 4)
        return (lambda a: ad.tensor_sum(ad.activation(kind, a) * w)), [x]

    def softmax(_):
        x = shape(2, int(rng.integers(2, 6)))
        mask = rng.random(x.shape) < 0.7
        mask[:, 0] = True
        w = shape(*x.shape)
        return (lambda a: ad.tensor_sum(ad.softmax(a, mask=mask) * w)), [x]

    def losses(i):
        if i % 2:
            target = shape(3, 2)
            return (lambda a: ad.mse_loss(a, target)), [shape(3, 2)]
        k = int(rng.integers(2, 5))
        target = rng.integers(0, k, size=4)
        return (lambda a: ad.cross_entropy_loss(a, target)), [shape(4, k) * 2]

    def lstm(_):
        D, H = 3, 2
        def build(x, h, c, w, u, b):
            h2, c2 = lstm_cell(x, h, c, w, u, b)
            return ad.tensor_sum(h2 * h2) + ad.tensor_sum(c2)
        return build, [shape(2, D), shape(2, H), shape(2, H), shape(D, 4 * H) * 0.5,
                       shape(H, 4 * H) * 0.5, shape(4 * H) * 0.5]

    def attention_block(i):
        H, T, heads = 4, 3, 2
        mask = np.tril(np.ones((T, T), dtype=bool))
        if i % 2:
            names = [f"a.{n}" for n in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")]
            raw = [shape(H, H) * 0.5 if "W" in n else shape(H) * 0.1 for n in names]
            w = shape(1, T, H)

            def build(h, *ps):
                return ad.tensor_sum(attention(h, dict(zip(names, ps)), "a", heads, mask) * w)
            return build, [shape(1, T, H)] + raw
        F = 2 * H
        spec = {"ln1.g": (H,), "ln1.b": (H,), "ln2.g": (H,), "ln2.b": (H,), "ffn.W1": (H, F),
                "ffn.b1": (F,), "ffn.W2": (F, H), "ffn.b2": (H,)}
        spec.update({f"attn.{p}{n}": (H, H) if p == "W" else (H,) for n in "qkvo" for p in "Wb"})
        names = [f"b.{k}" for k in spec]
        raw = [shape(*s) * 0.5 + (1.0 if k.endswith(".g") else 0.0) for k, s in spec.items()]
        w = shape(1, T, H)

        def build(h, *ps):
            return ad.tensor_sum(transformer_block(h, dict(zip(names, ps)), "b", heads, mask) * w)
        return build, [shape(1, T, H)] + raw

    return {"matmul": matmul, "activations": activations, "softmax": softmax, "losses": losses,
            "lstm cell": lstm, "attention block": attention_block}


@criterion(1, "finite-difference gradient suite")
def test_gradient_suite():
    rng = np.random.default_rng(20261016)
    start = time.perf_counter()
    counts = {}
    for name, make in _fd_families(rng).items():
        for i in range(INSTANCES):
            build, arrays = make(i)
            finite_difference_check(build, arrays, step=1e-5, rtol=FD_RTOL, atol=1e-8,
                                    max_coords=12, rng=rng)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    assert all(c >= INSTANCES for c in counts.values()) and len(counts) == 6
    assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------- 2


@criterion(2, "Adam matches a scalar reference")
def test_adam_oracle():
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=7)
    grads = rng.normal(size=(1000, 7)) * rng.choice([1e-3, 1.0, 100.0], size=(1000, 1))
    p = ad.parameter(w0.copy())
    state = AdamState.for_params([p], lr=1e-3)
    trace = np.empty((1000, 7))
    for t in range(1000):
        p.grad = grads[t].copy()
        adam_step([p], state)
        trace[t] = p.data
    for j in range(7):
        ref = scalar_adam(float(w0[j]), grads[:, j].tolist(), 1e-3, 0.9, 0.999, 1e-8)
        assert np.max(np.abs(trace[:, j] - np.asarray(ref))) <= 1e-12


# ---------------------------------------------------------------- 3


@criterion(3, "gap sampler statistics")
def test_sampler_statistics():
    rng = np.random.default_rng(3)
    gaps = np.array([draw_gap(rng, 10) for _ in range(10_000)])
    freq = np.bincount(gaps, minlength=11)[1:] / len(gaps)
    assert gaps.min() >= 1 and gaps.max() <= 10
    assert np.all(np.abs(freq - 0.1) <= 0.015), freq
    for length in (40, 32, 1):
        full = sample_gaps(length, IrregularitySpec(1), np.random.default_rng(0))
        assert full.retained == complete_visits(length).retained == tuple(range(1, length + 1))
        assert full.is_complete


# ---------------------------------------------------------------- 4


@criterion(4, "dual split exactness")
def test_split_exactness():
    schema = small_schema(length=3)
    big = random_cohort(np.random.default_rng(0), 8916, schema)
    result = dual_split(big, SplitSpec(2, 1, seed=0))
    assert (len(result.train_patient_ids), len(result.test_patient_ids)) == (7132, 1784)
    rng = np.random.default_rng(4)
    for r in range(100):
        n = int(rng.integers(1, 300))
        cohort = random_cohort(rng, n, schema)
        s = dual_split(cohort, SplitSpec(2, 1, seed=r))
        train, test = set(s.train_patient_ids), set(s.test_patient_ids)
        assert not train & test and train | test == set(cohort.patient_ids)
        assert len(train) == (4 * n) // 5
    for dataset, windows in (("art_hiv", (40, 20)), ("hypotension", (32, 16))):
        doc = {"dataset": dataset, "model": {"kind": "lstm_seq2seq"}, "irregularity": {"g_max": 1},
               "output_dir": "unused"}
        assert parse_config(doc).windows(make_schema(dataset)) == windows


# ---------------------------------------------------------------- 5


@criterion(5, "metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a = rng.normal(size=int(rng.integers(1, 25))).round(int(rng.integers(0, 3)))
        b = rng.normal(size=int(rng.integers(1, 25))).round(int(rng.integers(0, 3)))
        assert abs(ks_statistic(a, b) - brute_force_ks(a, b)) <= 1e-12
    checked = 0
    while checked < 1000:
        n = int(rng.integers(2, 40))
        x = rng.integers(0, int(rng.integers(2, 5)), size=n)
        y = rng.integers(0, int(rng.integers(2, 5)), size=n)
        if len(set(x.tolist())) < 2 or len(set(y.tolist())) < 2:
            continue
        assert abs(cramers_v(x, y) - direct_cramers_v(x.tolist(), y.tolist())) <= 1e-12
        checked += 1
    assert tv_distance([0.5, 0.5], [1, 0]) == 0.5


# ---------------------------------------------------------------- 6


@criterion(6, "generator association oracle")
def test_generator_oracle():
    schema = small_schema(length=60)
    n = 2000
    cohort = generate_synthetic_cohort(spec_for(schema, n, {"A": 0.8, "B": 0.5, "C": 0.0}), 6)
    m = association_matrix(window_values(cohort, 41, 60), schema)
    got = m.get(0, 1)
    rng = np.random.default_rng(606)
    reps = []
    for _ in range(20):
        xi, xj = latent_oracle(rng, n, 60, 0.9, 0.8, 0.5)
        reps.append(np.corrcoef(xi[:, 40:].ravel(), xj[:, 40:].ravel())[0, 1])
    se = float(np.std(reps, ddof=1))
    assert abs(got - 0.40) <= 3 * se, (got, se)

    zero = generate_synthetic_cohort(spec_for(schema, n, {"A": 0.0, "B": 0.0, "C": 0.0}), 7)
    mz = association_matrix(window_values(zero, 41, 60), schema)
    off = [mz.get(i, j) for i in range(3) for j in range(3) if i != j]
    assert max(abs(v) for v in off) < 0.05, off


# ---------------------------------------------------------------- 7


def _easy_doc(kind, out):
    schema = make_schema("art_hiv")
    return {
        "dataset": "art_hiv",
        "source": {"kind": "synthetic", "n_patients": 500, "rho": 0.9,
                   "loadings": {f: 0.9 for f in schema.feature_names}},
        "model": {"kind": kind},
        "irregularity": {"g_max": 10},
        "training": {"epochs": 10},
        "decoding": "sample",
        "output_dir": str(out),
        "master_seed": 7,
    }


@criterion(7, "end-to-end marginals on the easy ART cohort")
@pytest.mark.slow
@pytest.mark.parametrize("kind", ["lstm_seq2seq", "ethos_lite"])
def test_end_to_end_marginals(tmp_path, kind):
    start = time.perf_counter()
    result = run_experiment(parse_config(_easy_doc(kind, tmp_path / kind)))
    elapsed = time.perf_counter() - start
    losses = result.train_report.epoch_losses
    assert losses[-1] < losses[0]
    for m in result.report.marginals:
        limit = 0.15 if m.kind == "ks" else 0.20
        assert m.value < limit, (m.feature, m.kind, m.value)
    assert elapsed < 600, f"{kind} took {elapsed:.0f}s"


# ---------------------------------------------------------------- 8


@criterion(8, "undefined tiles for a single-level feature")
def test_undefined_tiles(tmp_path):
    doc = {
        "dataset": "custom",
        "schema": {"numeric_features": [{"name": "A"}, {"name": "B"}],
                   "categorical_features": [{"name": "Solo", "levels": ["only"]},
                                            {"name": "D", "levels": ["x", "y", "z"]}],
                   "sequence_length": 12},
        "source": {"kind": "synthetic", "n_patients": 80, "rho": 0.9,
                   "loadings": {"A": 0.8, "B": 0.6, "Solo": 0.0, "D": 0.7},
                   "numeric_params": {"A": {"mu": 0.0, "sigma": 1.0}, "B": {"mu": 5.0, "sigma": 2.0}},
                   "categorical_probs": {"Solo": [1.0], "D": [0.3, 0.4, 0.3]}},
        "split": {"observation_length": 8, "prediction_length": 4},
        "model": {"kind": "ethos_lite", "hidden_dim": 8, "heads": 2},
        "irregularity": {"g_max": 2},
        "training": {"epochs": 2},
        "output_dir": str(tmp_path / "run"),
    }
    result = run_experiment(parse_config(doc))
    report = result.report
    solo = report.real.features.index("Solo")
    n = len(report.real.features)
    for matrix in (report.real, report.synthetic):
        for k in range(n):
            assert not matrix.is_defined(solo, k) and not matrix.is_defined(k, solo)
        assert math.isnan(matrix.values[solo, 0]) and matrix.reasons[(solo, 0)]
        with pytest.raises(ContractError):
            matrix.get(solo, 0)

    saved = json.loads((tmp_path / "run" / "report.json").read_text())
    for side in ("association_real", "association_synthetic"):
        values = saved[side]["values"]
        assert values[solo] == [None] * n and all(row[solo] is None for row in values)

    for name in ("heatmap_real.svg", "heatmap_synthetic.svg"):
        svg = (tmp_path / "run" / "plots" / name).read_text()
        assert svg.count('class="undefined"') == 2 * n - 1
        assert "nan" not in svg.lower()

    shared = [(i, j) for i in range(n) for j in range(i + 1, n)
              if report.real.is_defined(i, j) and report.synthetic.is_defined(i, j)]
    expected = math.fsum(abs(report.real.get(i, j) - report.synthetic.get(i, j)) for i, j in shared) / len(shared)
    assert all(solo not in pair for pair in shared)
    assert report.correlation_gap == pytest.approx(expected, abs=1e-15)
    assert correlation_gap(report.real, report.synthetic) == report.correlation_gap


# ---------------------------------------------------------------- 9


def _digests(root: Path) -> dict[str, str]:
    files = sorted(p for p in root.rglob("*") if p.suffix in (".json", ".csv") and p.name not in
                   ("timing.json",))
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


@criterion(9, "grid preset is byte-reproducible")
@pytest.mark.slow
def test_grid_determinism(tmp_path):
    args = ["grid", "--preset", "paper", "--master-seed", "11", "--n-patients", "30"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    assert sum(k.endswith("report.json") for k in a) == 8
    assert sum(k.endswith(".csv") for k in a) == 16
    assert a == b


# ---------------------------------------------------------------- 10


@criterion(10, "Transformer causality")
def test_causality():
    rng = np.random.default_rng(10)
    schema = make_schema("art_hiv")
    for case in range(100):
        heads = int(rng.choice([1, 2, 4]))
        T = int(rng.integers(2, 12))
        cfg = ModelConfig.for_schema("ethos_lite", schema, seed=case, hidden_dim=4 * heads, heads=heads,
                                     max_positions=T)
        model = build_model(cfg)
        x = rng.normal(size=(int(rng.integers(1, 4)), T, cfg.input_dim))
        t = int(rng.integers(0, T))
        y = x.copy()
        y[:, t:] += rng.normal(size=y[:, t:].shape) * float(rng.choice([1e-3, 1.0, 100.0]))
        base, moved = model.forward(x), model.forward(y)
        assert moved.numeric.data[:, :t].tobytes() == base.numeric.data[:, :t].tobytes()
        for p, q in zip(moved.categorical_logits, base.categorical_logits):
            assert p.data[:, :t].tobytes() == q.data[:, :t].tobytes()
