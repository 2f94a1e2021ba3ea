"""Dual split (patients x time) and controlled irregular visit sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .cohort import Cohort, FeatureSchema, Normalizer, PatientTrajectory, patient_rng
from .errors import ConfigurationError, ContractError

# (dataset, moderate G_max, severe G_max)
GMAX_PRESETS = {"art_hiv": (10, 35), "hypotension": (8, 28)}
WINDOW_PRESETS = {"art_hiv": (40, 20), "hypotension": (32, 16)}


class IntegerStream(Protocol):
    def integers(self, low: int, high: int) -> int: ...


@dataclass(frozen=True)
class SplitSpec:
    observation_length: int
    prediction_length: int
    train_fraction: float = 0.8
    seed: int = 0

    @classmethod
    def preset(cls, dataset_id: str, seed: int = 0) -> "SplitSpec":
        try:
            obs, pred = WINDOW_PRESETS[dataset_id]
        except KeyError:
            raise ConfigurationError(f"no window preset for {dataset_id!r}") from None
        return cls(obs, pred, 0.8, seed)

    def check(self, schema: FeatureSchema) -> None:
        if self.observation_length < 1 or self.prediction_length < 1:
            raise ConfigurationError("window lengths must be positive")
        if self.observation_length + self.prediction_length != schema.sequence_length:
            raise ConfigurationError(
                f"observation_length + prediction_length = "
                f"{self.observation_length + self.prediction_length} but the schema has "
                f"sequence_length {schema.sequence_length}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class SplitResult:
    train_patient_ids: tuple[str, ...]
    test_patient_ids: tuple[str, ...]
    observation_length: int
    sequence_length: int

    @property
    def observation_window(self) -> tuple[int, int]:
        return 1, self.observation_length

    @property
    def prediction_window(self) -> tuple[int, int]:
        return self.observation_length + 1, self.sequence_length


def dual_split(cohort: Cohort, spec: SplitSpec) -> SplitResult:
    """Seeded 80/20 patient split plus the observation/prediction cut in time."""
    if len(cohort) == 0:
        raise ContractError("cannot split an empty cohort")
    spec.check(cohort.schema)
    ids = cohort.patient_ids
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    n_train = math.floor(spec.train_fraction * len(ids))
    return SplitResult(tuple(ids[i] for i in order[:n_train]),
                       tuple(ids[i] for i in order[n_train:]),
                       spec.observation_length, cohort.schema.sequence_length)


@dataclass(frozen=True)
class IrregularitySpec:
    g_max: int
    resample_per_epoch: bool = False
    seed: int = 0

    def __post_init__(self):
        if int(self.g_max) != self.g_max or self.g_max < 1:
            raise ConfigurationError(f"g_max must be an integer >= 1, got {self.g_max}")


@dataclass(frozen=True)
class VisitIndexSet:
    retained: tuple[int, ...]
    delta_t: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.delta_t:
            object.__setattr__(self, "delta_t", tuple(compute_delta_t(self.retained)))

    def __len__(self) -> int:
        return len(self.retained)

    @property
    def is_complete(self) -> bool:
        return all(d == 1 for d in self.delta_t[1:])


def draw_gap(stream: IntegerStream, g_max: int) -> int:
    """One inter-visit gap, uniform on the integers ``1..g_max``."""
    return int(stream.integers(1, g_max + 1))


def sample_gaps(observation_length: int, spec: IrregularitySpec, stream: IntegerStream) -> VisitIndexSet:
    """Retain step 1, then keep jumping by random gaps until past the window."""
    if observation_length < 1:
        raise ContractError("observation_length must be at least 1")
    retained = [1]
    while True:
        nxt = retained[-1] + draw_gap(stream, spec.g_max)
        if nxt > observation_length:
            break
        retained.append(nxt)
    return VisitIndexSet(tuple(retained))


def complete_visits(length: int) -> VisitIndexSet:
    return VisitIndexSet(tuple(range(1, length + 1)))


def compute_delta_t(retained: Sequence[int]) -> list[int]:
    retained = [int(r) for r in retained]
    if not retained or retained[0] != 1:
        raise ContractError("retained indices must start at step 1")
    if any(b <= a for a, b in zip(retained, retained[1:])):
        raise ContractError("retained indices must be strictly increasing")
    return [0] + [b - a for a, b in zip(retained, retained[1:])]


def patient_visits(spec: IrregularitySpec, observation_length: int, patient_index: int,
                   epoch: int = 0) -> VisitIndexSet:
    """Visit pattern for one patient; varies per epoch only when resampling is on."""
    key = (patient_index, epoch) if spec.resample_per_epoch else (patient_index,)
    return sample_gaps(observation_length, spec, patient_rng(spec.seed, *key))


def encode_steps(numeric: np.ndarray, categorical: np.ndarray, delta_t: Sequence[float],
                 schema: FeatureSchema, normalizer: Normalizer, g_max: int) -> np.ndarray:
    """Encode raw steps as ``[z-scored numeric | one-hot blocks | delta_t / g_max]``.

    ``numeric`` is ``(..., k, n_numeric)`` in schema units and ``categorical``
    is ``(..., k, n_categorical)`` level indices.
    """
    if normalizer is None or not normalizer.fitted:
        raise ContractError("normalizer has not been fitted")
    numeric = np.asarray(numeric, dtype=np.float64)
    lead = numeric.shape[:-1]
    parts = [normalizer.transform(numeric)]
    for j, k in enumerate(schema.level_counts):
        parts.append(np.eye(k)[np.asarray(categorical)[..., j]])
    dt = np.broadcast_to(np.asarray(delta_t, dtype=np.float64), lead)
    parts.append((dt / float(g_max))[..., None])
    return np.concatenate(parts, axis=-1)


def encode_visits(trajectory: PatientTrajectory, visits: VisitIndexSet, schema: FeatureSchema,
                  normalizer: Normalizer, spec: IrregularitySpec) -> np.ndarray:
    """Encode the retained visits of one trajectory into a ``(k, D)`` matrix."""
    rows = np.asarray(visits.retained) - 1
    if rows.size == 0 or rows.min() < 0 or rows.max() >= schema.sequence_length:
        raise ContractError("visit indices outside the trajectory")
    return encode_steps(trajectory.numeric_values[rows], trajectory.categorical_values[rows],
                        visits.delta_t, schema, normalizer, spec.g_max)


def encode_evaluation_window(trajectory: PatientTrajectory, visits: VisitIndexSet,
                             schema: FeatureSchema, normalizer: Normalizer,
                             spec: IrregularitySpec) -> np.ndarray:
    """Encoder used on test trajectories. Refuses anything but a complete window."""
    if not visits.is_complete:
        raise ContractError("evaluation windows must be complete (no subsampling on the test side)")
    return encode_visits(trajectory, visits, schema, normalizer, spec)


@dataclass(frozen=True)
class DecodedBlocks:
    numeric: np.ndarray
    categorical: np.ndarray
    delta_t: np.ndarray


def decode_encoded(encoded: np.ndarray, schema: FeatureSchema, normalizer: Normalizer,
                   g_max: int) -> DecodedBlocks:
    """Invert :func:`encode_steps` (argmax per one-hot block)."""
    n = schema.n_numeric
    numeric = normalizer.inverse(encoded[..., :n])
    cats, off = [], n
    for k in schema.level_counts:
        cats.append(encoded[..., off:off + k].argmax(axis=-1))
        off += k
    cat = np.stack(cats, axis=-1) if cats else np.zeros(encoded.shape[:-1] + (0,), dtype=np.int64)
    return DecodedBlocks(numeric, cat, encoded[..., -1] * g_max)
