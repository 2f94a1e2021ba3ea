"""Reconstruction objective and the fixed Adam training recipe."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .cohort import Cohort, FeatureSchema, Normalizer
from .errors import ConfigurationError, ContractError, NonFiniteError
from .models import (EthosLite, LSTMSeq2Seq, ModelConfig, SequenceModel, StepPrediction,
                     build_model)
from .optim import AdamState, adam_step, clip_grad_norm
from .sampling import IrregularitySpec, SplitResult, encode_steps, patient_visits


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    numeric_loss_weight: float = 1.0
    categorical_loss_weight: float = 1.0
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.numeric_loss_weight < 0 or self.categorical_loss_weight < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.numeric_loss_weight == 0 and self.categorical_loss_weight == 0:
            raise ConfigurationError("loss weights cannot both be zero")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be positive when set")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    epoch_seconds: list[float]
    checksum: str
    adam_steps: int
    batches_per_epoch: int

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"epoch_losses": list(self.epoch_losses), "checksum": self.checksum,
             "adam_steps": self.adam_steps, "batches_per_epoch": self.batches_per_epoch}
        if include_timing:
            d["epoch_seconds"] = list(self.epoch_seconds)
        return d


@dataclass
class AccessAudit:
    """Records which patients and steps the training path reads."""

    patients: set = field(default_factory=set)
    max_step: int = 0

    def record(self, patient_id: str, last_step: int) -> None:
        self.patients.add(patient_id)
        self.max_step = max(self.max_step, last_step)

    def leaks(self, split: SplitResult) -> tuple[int, int]:
        """(test patients touched, prediction-window steps touched)."""
        test_hits = len(self.patients & set(split.test_patient_ids))
        future = max(0, self.max_step - split.observation_length)
        return test_hits, future


def _targets_from_encoded(encoded: np.ndarray, level_counts) -> tuple[np.ndarray, list[np.ndarray]]:
    n_num = encoded.shape[-1] - sum(level_counts) - 1
    idx, off = [], n_num
    for k in level_counts:
        idx.append(encoded[..., off:off + k].argmax(axis=-1))
        off += k
    return encoded[..., :n_num], idx


def reconstruction_loss(preds: StepPrediction, targets: np.ndarray, schema: FeatureSchema,
                        weights: tuple[float, float] = (1.0, 1.0),
                        mask: np.ndarray | None = None) -> Tensor:
    """Weighted MSE on z-scored numerics plus mean cross-entropy over categorical heads.

    ``targets`` are encoded visits aligned one-to-one with ``preds`` along the
    time axis; ``mask`` (``(B, T)``) excludes padding.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 2:
        targets = targets[None]
    if targets.shape[:2] != preds.numeric.shape[:2]:
        raise ContractError(f"predictions cover {preds.numeric.shape[:2]} steps, "
                            f"targets {targets.shape[:2]}")
    num_w, cat_w = weights
    tnum, tcat = _targets_from_encoded(targets, schema.level_counts)
    loss = Tensor(np.asarray(0.0))
    if schema.n_numeric and num_w:
        loss = loss + ad.mse_loss(preds.numeric, tnum, mask) * num_w
    if tcat and cat_w:
        ce = [ad.cross_entropy_loss(logits, idx, mask)
              for logits, idx in zip(preds.categorical_logits, tcat)]
        loss = loss + ad.tensor_sum(ad.stack(ce)) * (cat_w / len(ce))
    return loss


# ---------------------------------------------------------------------------
# batch construction


def training_windows(cohort: Cohort, split: SplitResult, normalizer: Normalizer,
                     audit: AccessAudit | None = None) -> tuple[list[int], np.ndarray]:
    """Encoded observation windows of the training patients (gap channel left at 0).

    Only steps ``1..observation_length`` of training patients are read.
    """
    s = cohort.schema
    obs = split.observation_length
    index = cohort.index_of()
    rows, windows = [], []
    for pid in split.train_patient_ids:
        p = cohort.patients[index[pid]]
        if audit is not None:
            audit.record(pid, obs)
        windows.append(encode_steps(p.numeric_values[:obs], p.categorical_values[:obs],
                                    np.zeros(obs), s, normalizer, 1))
        rows.append(index[pid])
    if not windows:
        raise ContractError("no training patients")
    return rows, np.stack(windows)


def _visit_rows(window: np.ndarray, retained, delta_t, g_max: int) -> np.ndarray:
    rows = window[np.asarray(retained) - 1].copy()
    rows[:, -1] = np.asarray(delta_t, dtype=np.float64) / g_max
    return rows


def _pad(seqs: list[np.ndarray], width: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(1, max(len(s) for s in seqs))
    out = np.zeros((len(seqs), T, width))
    mask = np.zeros((len(seqs), T), dtype=bool)
    for b, s in enumerate(seqs):
        out[b, :len(s)] = s
        mask[b, :len(s)] = True
    return out, mask


@dataclass
class Batch:
    inputs: np.ndarray
    input_mask: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    decoder_inputs: np.ndarray | None = None
    positions: np.ndarray | None = None


def lstm_batch(seqs: list[tuple[np.ndarray, tuple]]) -> Batch:
    """Encoder gets the first ceil(k/2) visits; the decoder reconstructs the rest.

    Each decoder input is the previous visit with its gap channel replaced by
    the gap to the visit being predicted.
    """
    enc, dec_in, tgt = [], [], []
    for rows, _ in seqs:
        k = len(rows)
        ne = math.ceil(k / 2)
        enc.append(rows[:ne])
        tgt.append(rows[ne:])
        d = rows[ne - 1:k - 1].copy()
        d[:, -1] = rows[ne:, -1]
        dec_in.append(d)
    D = seqs[0][0].shape[1]
    e, em = _pad(enc, D)
    t, tm = _pad(tgt, D)
    d, _ = _pad(dec_in, D)
    return Batch(e, em, t, tm, decoder_inputs=d)


def transformer_batch(seqs: list[tuple[np.ndarray, tuple]]) -> Batch:
    """Next-retained-visit prediction; positions are the visits' step offsets."""
    ins, tgt, pos = [], [], []
    for rows, retained in seqs:
        ins.append(rows[:-1])
        tgt.append(rows[1:])
        pos.append(np.asarray(retained[:-1]) - 1)
    D = seqs[0][0].shape[1]
    x, xm = _pad(ins, D)
    t, tm = _pad(tgt, D)
    positions = np.zeros(xm.shape, dtype=np.int64)
    for b, p in enumerate(pos):
        positions[b, :len(p)] = p
    return Batch(x, xm, t, tm, positions=positions)


def model_predictions(model: SequenceModel, batch: Batch) -> StepPrediction:
    if isinstance(model, LSTMSeq2Seq):
        return model.forward(batch.inputs, batch.input_mask, batch.decoder_inputs)
    return model.forward(batch.inputs, batch.positions)


def one_step_residual_std(model: SequenceModel, windows: np.ndarray) -> np.ndarray:
    """RMS of teacher-forced one-step numeric residuals on complete windows.

    Used as the noise scale of sampled decoding, where generated steps are
    one step apart.
    """
    W = windows.copy()
    W[:, 1:, -1] = 1.0 / model.g_max
    W[:, 0, -1] = 0.0
    T = W.shape[1]
    n = model.config.n_numeric
    if T < 2 or n == 0:
        return np.ones(n)
    with no_grad():
        if isinstance(model, LSTMSeq2Seq):
            ne = math.ceil(T / 2)
            dec = W[:, ne - 1:T - 1].copy()
            dec[:, :, -1] = 1.0 / model.g_max
            pred = model.forward(W[:, :ne], None, dec).numeric.data
            target = W[:, ne:, :n]
        else:
            pred = model.forward(W[:, :-1]).numeric.data
            target = W[:, 1:, :n]
    return np.sqrt(((pred - target) ** 2).mean(axis=(0, 1)))


def epoch_stream(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(epoch,))))


def train(model_cfg: ModelConfig, cohort: Cohort, split: SplitResult, irregularity: IrregularitySpec,
          train_cfg: TrainConfig, normalizer: Normalizer, audit: AccessAudit | None = None,
          log: Callable[[str], None] | None = None) -> tuple[SequenceModel, TrainReport]:
    """Fit a model for ``train_cfg.epochs`` epochs on subsampled observation windows."""
    if not normalizer.fitted:
        raise ContractError("normalizer must be fitted on the training observation windows")
    schema = cohort.schema
    if model_cfg.input_dim != schema.encoded_dim:
        raise ConfigurationError(f"model input_dim {model_cfg.input_dim} != encoded width "
                                 f"{schema.encoded_dim}")
    model = build_model(model_cfg)
    model.g_max = irregularity.g_max
    rows, windows = training_windows(cohort, split, normalizer, audit)
    obs = split.observation_length
    make_batch = lstm_batch if isinstance(model, LSTMSeq2Seq) else transformer_batch
    params = model.parameters()
    state = AdamState.for_params(params, lr=train_cfg.lr)
    weights = (train_cfg.numeric_loss_weight, train_cfg.categorical_loss_weight)
    n = len(rows)
    bs = train_cfg.batch_size
    n_batches = math.ceil(n / bs)

    fixed = None
    if not irregularity.resample_per_epoch:
        fixed = [patient_visits(irregularity, obs, r) for r in rows]

    epoch_losses, epoch_seconds = [], []
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        visits = fixed or [patient_visits(irregularity, obs, r, epoch) for r in rows]
        order = epoch_stream(train_cfg.seed, epoch).permutation(n)
        batch_losses = []
        for b in range(n_batches):
            members = order[b * bs:(b + 1) * bs]
            seqs = [(_visit_rows(windows[i], visits[i].retained, visits[i].delta_t,
                                 irregularity.g_max), visits[i].retained) for i in members]
            batch = make_batch(seqs)
            try:
                preds = model_predictions(model, batch)
                loss = reconstruction_loss(preds, batch.targets, schema, weights, batch.target_mask)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite value at epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}: {value}")
            ad.zero_grad(params)
            ad.backward(loss, params)
            if train_cfg.clip_norm is not None:
                clip_grad_norm(params, train_cfg.clip_norm)
            adam_step(params, state)
            batch_losses.append(value)
        epoch_losses.append(float(np.mean(batch_losses)))
        epoch_seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(f"epoch {epoch + 1}/{train_cfg.epochs} loss {epoch_losses[-1]:.5f}")
    model.residual_std = one_step_residual_std(model, windows)
    report = TrainReport(epoch_losses, epoch_seconds, model.checksum(), state.t, n_batches)
    return model, report
