"""Experiment configuration (JSON) with field-path validation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .cohort import FeatureSchema, GeneratorSpec, default_generator_spec, make_schema
from .errors import ConfigurationError
from .sampling import WINDOW_PRESETS

Loading = Annotated[float, Field(ge=-1.0, le=1.0)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NumericParam(_Strict):
    mu: float
    sigma: float = Field(gt=0)


class SyntheticSource(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    n_patients: int | None = Field(default=None, ge=1)
    rho: float | None = Field(default=None, ge=0.0, lt=1.0)
    loadings: dict[str, Loading] = Field(default_factory=dict)
    numeric_params: dict[str, NumericParam] = Field(default_factory=dict)
    categorical_probs: dict[str, list[Annotated[float, Field(ge=0.0)]]] = Field(default_factory=dict)


class CsvSource(_Strict):
    kind: Literal["csv"]
    path: str


class ModelSection(_Strict):
    kind: Literal["lstm_seq2seq", "ethos_lite"]
    hidden_dim: int = Field(default=64, ge=1)
    heads: int = Field(default=4, ge=1)
    layers: int | None = Field(default=None, ge=1)
    ffn_mult: int = Field(default=4, ge=1)


class SplitSection(_Strict):
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    observation_length: int | None = Field(default=None, ge=1)
    prediction_length: int | None = Field(default=None, ge=1)


class IrregularitySection(_Strict):
    g_max: int = Field(ge=1)
    resample_per_epoch: bool = False


class TrainingSection(_Strict):
    epochs: int = Field(default=10, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=32, ge=1)
    numeric_loss_weight: float = Field(default=1.0, ge=0.0)
    categorical_loss_weight: float = Field(default=1.0, ge=0.0)
    clip_norm: float | None = Field(default=None, gt=0.0)


class ExperimentConfig(_Strict):
    dataset: Literal["art_hiv", "hypotension", "custom"]
    schema_: dict | None = Field(default=None, alias="schema")
    source: Annotated[Union[SyntheticSource, CsvSource], Field(discriminator="kind")] = \
        Field(default_factory=SyntheticSource)
    model: ModelSection
    split: SplitSection = Field(default_factory=SplitSection)
    irregularity: IrregularitySection
    training: TrainingSection = Field(default_factory=TrainingSection)
    decoding: Literal["sample", "argmax"] = "sample"
    output_dir: str
    master_seed: int = Field(default=0, ge=0)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def _cross_checks(self):
        errors: list[tuple[str, str]] = []
        try:
            schema = self.feature_schema()
        except ConfigurationError as exc:
            raise ValueError(f"schema: {exc}") from None
        obs, pred = self.windows(schema)
        if obs is None or pred is None:
            errors.append(("split", "observation_length and prediction_length are required "
                                    "for custom datasets"))
        elif obs + pred != schema.sequence_length:
            errors.append(("split", f"observation_length + prediction_length = {obs + pred} "
                                    f"but sequence_length is {schema.sequence_length}"))
        if self.model.kind == "ethos_lite" and self.model.hidden_dim % self.model.heads:
            errors.append(("model.heads", "hidden_dim must be divisible by heads"))
        if self.model.kind == "lstm_seq2seq" and self.model.layers not in (None, 1):
            errors.append(("model.layers", "the LSTM encoder-decoder has exactly one layer"))
        t = self.training
        if t.numeric_loss_weight == 0 and t.categorical_loss_weight == 0:
            errors.append(("training", "loss weights cannot both be zero"))
        src = self.source
        if isinstance(src, CsvSource):
            if not Path(src.path).is_file():
                errors.append(("source.path", f"file not found: {src.path}"))
        else:
            names = set(schema.feature_names)
            for name in src.loadings:
                if name not in names:
                    errors.append((f"source.loadings.{name}", "unknown feature"))
            for name in src.numeric_params:
                if name not in schema.numeric_names:
                    errors.append((f"source.numeric_params.{name}", "unknown numeric feature"))
            for name, probs in src.categorical_probs.items():
                if name not in schema.categorical_names:
                    errors.append((f"source.categorical_probs.{name}", "unknown categorical feature"))
                    continue
                if len(probs) != len(schema.feature(name).levels):
                    errors.append((f"source.categorical_probs.{name}",
                                   f"expected {len(schema.feature(name).levels)} probabilities"))
                elif abs(sum(probs) - 1.0) > 1e-9:
                    errors.append((f"source.categorical_probs.{name}", "probabilities must sum to 1"))
            if not errors:
                try:
                    self.generator_spec()
                except ConfigurationError as exc:
                    errors.append(("source", str(exc)))
        if errors:
            raise ValueError("; ".join(f"{path}: {msg}" for path, msg in errors))
        return self

    def feature_schema(self) -> FeatureSchema:
        if self.dataset == "custom":
            if self.schema_ is None:
                raise ConfigurationError("custom datasets need an inline schema")
            return FeatureSchema.from_dict({**self.schema_, "dataset_id": "custom"})
        return make_schema(self.dataset)

    def windows(self, schema: FeatureSchema | None = None) -> tuple[int | None, int | None]:
        preset = WINDOW_PRESETS.get(self.dataset, (None, None))
        obs = self.split.observation_length or preset[0]
        pred = self.split.prediction_length or preset[1]
        return obs, pred

    def generator_spec(self) -> GeneratorSpec:
        src = self.source
        if not isinstance(src, SyntheticSource):
            raise ConfigurationError("source is not synthetic")
        doc = {
            "schema": self.dataset if self.dataset != "custom" else
            {**(self.schema_ or {}), "dataset_id": "custom"},
            "loadings": src.loadings,
            "numeric_params": {k: v.model_dump() for k, v in src.numeric_params.items()},
            "categorical_probs": src.categorical_probs,
        }
        if src.n_patients is not None:
            doc["n_patients"] = src.n_patients
        if src.rho is not None:
            doc["rho"] = src.rho
        base = default_generator_spec(self.dataset) if self.dataset != "custom" else None
        return GeneratorSpec.from_dict(doc, base=base)

    def echo(self) -> dict:
        """Config as JSON, without ``output_dir`` so results do not depend on where they land."""
        d = self.model_dump(mode="json", by_alias=True)
        d.pop("output_dir", None)
        return d


class ConfigValidationError(ConfigurationError):
    """Validation failure carrying ``(field_path, message)`` pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))


def _problems(exc: ValidationError) -> list[tuple[str, str]]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"] if not str(x).startswith(("function-after", "tagged-union")))
        msg = err["msg"]
        if err["type"] == "value_error":
            msg = msg.removeprefix("Value error, ")
            for part in msg.split("; "):
                path, _, text = part.partition(": ")
                out.append(((f"{loc}.{path}" if loc else path), text or path))
            continue
        out.append((loc or "<root>", msg))
    return out


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigValidationError(_problems(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigValidationError([("<file>", f"config not found: {path}")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([("<file>", f"invalid JSON: {exc}")]) from None
    if not isinstance(doc, dict):
        raise ConfigValidationError([("<root>", "config must be a JSON object")])
    return parse_config(doc)


STAGES = ("cohort", "split", "irregularity", "model", "training", "rollout")


def derive_seed(master_seed: int, label: str) -> int:
    """Stage seed from the master seed and a stage label (SHA-256, 63 bits)."""
    digest = hashlib.sha256(f"{master_seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stage_seeds(master_seed: int) -> dict[str, int]:
    return {label: derive_seed(master_seed, label) for label in STAGES}
