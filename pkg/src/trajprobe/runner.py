"""End-to-end experiment pipeline and the preset grid."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import Cohort, fit_normalizer, generate_synthetic_cohort, load_cohort_csv
from .config import CsvSource, ExperimentConfig, parse_config, stage_seeds
from .fidelity import FidelityReport, WindowValues, fidelity_report, window_values
from .models import ModelConfig, SequenceModel, model_to_bytes, rollout
from .plots import emit_plots
from .sampling import (GMAX_PRESETS, IrregularitySpec, SplitSpec, complete_visits, dual_split,
                       encode_evaluation_window)
from .training import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)

ROLLOUT_CHUNK = 256


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


@dataclass
class RunResult:
    output_dir: Path
    report: FidelityReport
    train_report: TrainReport
    model: SequenceModel
    files: dict[str, str]


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def load_source(config: ExperimentConfig, seed: int) -> Cohort:
    schema = config.feature_schema()
    if isinstance(config.source, CsvSource):
        return load_cohort_csv(config.source.path, schema)
    return generate_synthetic_cohort(config.generator_spec(), seed)


def synthesize(model: SequenceModel, cohort: Cohort, patient_ids, observation_length: int,
               irregularity: IrregularitySpec, normalizer, decoding: str, seed: int) -> WindowValues:
    """Roll out the prediction window for each listed patient from its complete observation window."""
    schema = cohort.schema
    horizon = schema.sequence_length - observation_length
    visits = complete_visits(observation_length)
    index = cohort.index_of()
    encoded = np.stack([encode_evaluation_window(cohort.patients[index[pid]], visits, schema,
                                                 normalizer, irregularity) for pid in patient_ids])
    nums, cats = [], []
    for c, start in enumerate(range(0, len(encoded), ROLLOUT_CHUNK)):
        out = rollout(model, encoded[start:start + ROLLOUT_CHUNK], horizon, schema, normalizer,
                      decoding=decoding, seed=seed + c)
        nums.append(out.numeric)
        cats.append(out.categorical)
    return WindowValues(np.concatenate(nums), np.concatenate(cats))


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None) -> RunResult:
    out = Path(output_dir or config.output_dir)
    seeds = stage_seeds(config.master_seed)
    timings: dict[str, float] = {}

    def timed(name):
        timings[name] = time.perf_counter()

    schema = config.feature_schema()
    obs, pred = config.windows(schema)
    timed("cohort")
    with _Stage("cohort"):
        cohort = load_source(config, seeds["cohort"])
    with _Stage("split"):
        split = dual_split(cohort, SplitSpec(obs, pred, config.split.train_fraction, seeds["split"]))
    with _Stage("normalize"):
        normalizer = fit_normalizer(cohort, split.train_patient_ids, split.observation_window)
    irregularity = IrregularitySpec(config.irregularity.g_max, config.irregularity.resample_per_epoch,
                                    seeds["irregularity"])
    m = config.model
    overrides = {"hidden_dim": m.hidden_dim, "heads": m.heads, "ffn_mult": m.ffn_mult}
    if m.layers is not None:
        overrides["layers"] = m.layers
    model_cfg = ModelConfig.for_schema(m.kind, schema, seed=seeds["model"], **overrides)
    t = config.training
    train_cfg = TrainConfig(t.epochs, t.lr, t.batch_size, t.numeric_loss_weight,
                            t.categorical_loss_weight, t.clip_norm, seeds["training"])
    timed("train")
    with _Stage("train"):
        model, train_report = train(model_cfg, cohort, split, irregularity, train_cfg, normalizer,
                                    log=log.info)
    timed("rollout")
    with _Stage("rollout"):
        synth = synthesize(model, cohort, split.test_patient_ids, obs, irregularity, normalizer,
                           config.decoding, seeds["rollout"])
    timed("fidelity")
    with _Stage("fidelity"):
        real = window_values(cohort.subset(split.test_patient_ids), obs + 1, schema.sequence_length)
        provenance = {"seeds": seeds, "config": config.echo(),
                      "n_train": len(split.train_patient_ids), "n_test": len(split.test_patient_ids),
                      "training": train_report.to_dict()}
        report = fidelity_report(real, synth, schema, {"dataset_id": schema.dataset_id,
                                                       "model_id": m.kind,
                                                       "g_max": config.irregularity.g_max,
                                                       "provenance": provenance})
    timed("write")
    with _Stage("write"):
        files = write_artifacts(out, report, model)
        manifest = {"config": config.echo(), "seeds": seeds, "files": files}
        atomic_write(out / "manifest.json", _json_bytes(manifest))
        marks = list(timings.items()) + [("end", time.perf_counter())]
        sidecar = {name: round(marks[i + 1][1] - start, 3) for i, (name, start) in enumerate(marks[:-1])}
        sidecar["epoch_seconds"] = train_report.epoch_seconds
        sidecar["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        atomic_write(out / "timing.json", _json_bytes(sidecar))
    return RunResult(out, report, train_report, model, files)


def write_artifacts(out: Path, report: FidelityReport, model: SequenceModel | None = None) -> dict[str, str]:
    """Write report, matrices, parameters and plots; returns ``{relative path: sha256}``."""
    blobs = {
        "report.json": _json_bytes(report.to_dict()),
        "assoc_real.csv": report.real.to_csv().encode("utf-8"),
        "assoc_synth.csv": report.synthetic.to_csv().encode("utf-8"),
    }
    if model is not None:
        blobs["model.bin"] = model_to_bytes(model)
    for name, data in blobs.items():
        atomic_write(out / name, data)
    plots = emit_plots(report, out / "plots")
    hashes = {name: hashlib.sha256(data).hexdigest() for name, data in blobs.items()}
    for p in sorted(plots):
        hashes[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return dict(sorted(hashes.items()))


def reemit_plots(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    report = FidelityReport.from_dict(json.loads((run_dir / "report.json").read_text(encoding="utf-8")))
    return emit_plots(report, run_dir / "plots")


# ---------------------------------------------------------------------------
# grid


def paper_grid(out_dir, master_seed: int = 0, n_patients: dict[str, int] | None = None,
               decoding: str = "sample") -> list[dict]:
    """{art_hiv, hypotension} x {lstm_seq2seq, ethos_lite} x {moderate, severe} G_max."""
    runs = []
    for dataset in ("art_hiv", "hypotension"):
        for kind in ("lstm_seq2seq", "ethos_lite"):
            for level, g in zip(("moderate", "severe"), GMAX_PRESETS[dataset]):
                source = {"kind": "synthetic"}
                if n_patients and dataset in n_patients:
                    source["n_patients"] = n_patients[dataset]
                runs.append({
                    "dataset": dataset,
                    "source": source,
                    "model": {"kind": kind},
                    "irregularity": {"g_max": g},
                    "decoding": decoding,
                    "output_dir": str(Path(out_dir) / f"{dataset}_{kind}_{level}_g{g}"),
                    "master_seed": master_seed,
                })
    return runs


def _run_one(doc: dict) -> dict:
    config = parse_config(doc)
    result = run_experiment(config)
    r = result.report
    return {"run": result.output_dir.name, "dataset": r.dataset_id, "model": r.model_id,
            "g_max": r.g_max, "correlation_gap": r.correlation_gap,
            "marginals": {m.feature: m.value for m in r.marginals},
            "final_loss": result.train_report.epoch_losses[-1]}


def run_grid(docs: list[dict], out_dir, workers: int = 1) -> list[dict]:
    configs = [parse_config(d) for d in docs]  # validate everything before any work starts
    del configs
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, docs))
    else:
        rows = [_run_one(d) for d in docs]
    atomic_write(Path(out_dir) / "grid_summary.json", _json_bytes(rows))
    return rows
