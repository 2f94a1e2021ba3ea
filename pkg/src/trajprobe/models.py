"""LSTM encoder-decoder and a small causal Transformer over encoded visits.

Both models share the same input encoding (see :mod:`trajprobe.sampling`) and
the same per-feature output heads: a linear map to z-scored numeric values and
one logit vector per categorical feature.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .cohort import FeatureSchema, Normalizer
from .errors import ConfigurationError, ContractError, ShapeError

MODEL_KINDS = ("lstm_seq2seq", "ethos_lite")
_MAGIC = b"TRAJPRB1"


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    input_dim: int
    n_numeric: int
    level_counts: tuple[int, ...]
    hidden_dim: int = 64
    layers: int = 1
    heads: int = 4
    ffn_mult: int = 4
    max_positions: int = 60
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level_counts", tuple(int(k) for k in self.level_counts))
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if min(self.input_dim, self.hidden_dim, self.layers, self.heads, self.max_positions) < 1:
            raise ConfigurationError("model dimensions must be positive")
        if self.kind == "ethos_lite" and self.hidden_dim % self.heads:
            raise ConfigurationError("hidden_dim must be divisible by heads")
        if self.kind == "lstm_seq2seq" and self.layers != 1:
            raise ConfigurationError("the LSTM encoder-decoder has a single layer")

    @classmethod
    def for_schema(cls, kind: str, schema: FeatureSchema, seed: int = 0, **overrides) -> "ModelConfig":
        defaults = {"layers": 2 if kind == "ethos_lite" else 1,
                    "max_positions": schema.sequence_length}
        defaults.update(overrides)
        return cls(kind=kind, input_dim=schema.encoded_dim, n_numeric=schema.n_numeric,
                   level_counts=tuple(schema.level_counts), seed=seed, **defaults)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_counts"] = list(self.level_counts)
        return d


@dataclass
class StepPrediction:
    """Predictions for a batch of sequences.

    ``numeric`` has shape ``(B, T, n_numeric)`` in z-space; each entry of
    ``categorical_logits`` has shape ``(B, T, K_f)``.
    """

    numeric: Tensor
    categorical_logits: list[Tensor]

    def __len__(self) -> int:
        return self.numeric.shape[1]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def _zeros(shape) -> Tensor:
    return ad.parameter(np.zeros(shape))


def _ones(shape) -> Tensor:
    return ad.parameter(np.ones(shape))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor):
    """One LSTM step. Gate blocks are ordered input, forget, candidate, output."""
    x, h, c = ad.as_tensor(x), ad.as_tensor(h), ad.as_tensor(c)
    if x.ndim == 1 and h.ndim == 1 and c.ndim == 1:
        h_new, c_new = lstm_cell(x.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1), w, u, b)
        return h_new.reshape(-1), c_new.reshape(-1)
    H = h.shape[-1]
    if w.shape != (x.shape[-1], 4 * H) or u.shape != (H, 4 * H) or b.shape != (4 * H,) \
            or c.shape != h.shape:
        raise ShapeError(f"lstm_cell shapes: x {x.shape}, h {h.shape}, c {c.shape}, "
                         f"W {w.shape}, U {u.shape}, b {b.shape}")
    z = ad.matmul(x, w) + ad.matmul(h, u) + b
    gates = ad.sigmoid(z)
    i = gates[..., 0:H]
    f = gates[..., H:2 * H]
    o = gates[..., 3 * H:4 * H]
    g = ad.tanh(z[..., 2 * H:3 * H])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


class SequenceModel:
    """Parameter container plus the shared output heads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.g_max = 1
        self.residual_std = np.ones(config.n_numeric)
        rng = np.random.default_rng(config.seed)
        self._build(rng)
        H = config.hidden_dim
        self.params["head.numeric.W"] = _uniform(rng, H, (H, config.n_numeric))
        self.params["head.numeric.b"] = _zeros((config.n_numeric,))
        for j, k in enumerate(config.level_counts):
            self.params[f"head.cat{j}.W"] = _uniform(rng, H, (H, k))
            self.params[f"head.cat{j}.b"] = _zeros((k,))

    def _build(self, rng):
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def heads(self, hidden: Tensor) -> StepPrediction:
        p = self.params
        numeric = linear(hidden, p["head.numeric.W"], p["head.numeric.b"])
        logits = [linear(hidden, p[f"head.cat{j}.W"], p[f"head.cat{j}.b"])
                  for j in range(len(self.config.level_counts))]
        return StepPrediction(numeric, logits)


class LSTMSeq2Seq(SequenceModel):
    """Separate single-layer encoder and decoder LSTMs sharing the output heads."""

    def _build(self, rng):
        D, H = self.config.input_dim, self.config.hidden_dim
        for part in ("enc", "dec"):
            self.params[f"{part}.W"] = _uniform(rng, D, (D, 4 * H))
            self.params[f"{part}.U"] = _uniform(rng, H, (H, 4 * H))
            self.params[f"{part}.b"] = _zeros((4 * H,))

    def _cell(self, part: str, x, h, c):
        p = self.params
        return lstm_cell(x, h, c, p[f"{part}.W"], p[f"{part}.U"], p[f"{part}.b"])

    def encode(self, enc_x: np.ndarray, enc_mask: np.ndarray | None = None):
        """Run the encoder over ``(B, T, D)`` inputs; padded steps carry the state through."""
        enc_x = np.asarray(enc_x, dtype=np.float64)
        if enc_x.ndim != 3 or enc_x.shape[1] == 0:
            raise ContractError("encoder input must be a nonempty (B, T, D) array")
        B, T, _ = enc_x.shape
        H = self.config.hidden_dim
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        for t in range(T):
            h_new, c_new = self._cell("enc", Tensor(enc_x[:, t]), h, c)
            if enc_mask is None or enc_mask[:, t].all():
                h, c = h_new, c_new
            else:
                m = enc_mask[:, t:t + 1].astype(np.float64)
                h = h_new * m + h * (1.0 - m)
                c = c_new * m + c * (1.0 - m)
        return h, c

    def decode(self, h, c, dec_x: np.ndarray):
        """Teacher-forced decoder; returns stacked hidden states ``(B, T, H)``."""
        dec_x = np.asarray(dec_x, dtype=np.float64)
        states = []
        for t in range(dec_x.shape[1]):
            h, c = self._cell("dec", Tensor(dec_x[:, t]), h, c)
            states.append(h)
        if not states:
            return Tensor(np.zeros((dec_x.shape[0], 0, self.config.hidden_dim)))
        return ad.stack(states, axis=1)

    def forward(self, enc_x, enc_mask, dec_x) -> StepPrediction:
        h, c = self.encode(enc_x, enc_mask)
        return self.heads(self.decode(h, c, dec_x))


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def attention(h: Tensor, params: dict, prefix: str, n_heads: int, mask: np.ndarray,
              weights_out: list | None = None) -> Tensor:
    """Multi-head self-attention on ``(B, T, H)``; ``mask[i, j]`` keeps key j for query i."""
    B, T, H = h.shape
    hd = H // n_heads

    def split(x):
        return x.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)

    q = split(linear(h, params[f"{prefix}.Wq"], params[f"{prefix}.bq"]))
    k = split(linear(h, params[f"{prefix}.Wk"], params[f"{prefix}.bk"]))
    v = split(linear(h, params[f"{prefix}.Wv"], params[f"{prefix}.bv"]))
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    w = ad.softmax(scores, axis=-1, mask=mask)
    if weights_out is not None:
        weights_out.append(w.data)
    out = ad.matmul(w, v).transpose(0, 2, 1, 3).reshape(B, T, H)
    return linear(out, params[f"{prefix}.Wo"], params[f"{prefix}.bo"])


def transformer_block(h: Tensor, params: dict, prefix: str, n_heads: int, mask: np.ndarray,
                      weights_out: list | None = None) -> Tensor:
    """Pre-norm block: attention and a ReLU feed-forward, each with a residual."""
    p = params
    a = ad.layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = h + attention(a, p, f"{prefix}.attn", n_heads, mask, weights_out)
    f = ad.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    f = ad.relu(linear(f, p[f"{prefix}.ffn.W1"], p[f"{prefix}.ffn.b1"]))
    return h + linear(f, p[f"{prefix}.ffn.W2"], p[f"{prefix}.ffn.b2"])


class EthosLite(SequenceModel):
    """Decoder-only Transformer: input projection, learned positions, pre-norm blocks."""

    def _build(self, rng):
        cfg = self.config
        D, H, F = cfg.input_dim, cfg.hidden_dim, cfg.ffn_mult * cfg.hidden_dim
        p = self.params
        p["in.W"] = _uniform(rng, D, (D, H))
        p["in.b"] = _zeros((H,))
        p["pos"] = _uniform(rng, H, (cfg.max_positions, H))
        for layer in range(cfg.layers):
            pre = f"block{layer}"
            p[f"{pre}.ln1.g"] = _ones((H,))
            p[f"{pre}.ln1.b"] = _zeros((H,))
            for name in ("q", "k", "v", "o"):
                p[f"{pre}.attn.W{name}"] = _uniform(rng, H, (H, H))
                p[f"{pre}.attn.b{name}"] = _zeros((H,))
            p[f"{pre}.ln2.g"] = _ones((H,))
            p[f"{pre}.ln2.b"] = _zeros((H,))
            p[f"{pre}.ffn.W1"] = _uniform(rng, H, (H, F))
            p[f"{pre}.ffn.b1"] = _zeros((F,))
            p[f"{pre}.ffn.W2"] = _uniform(rng, F, (F, H))
            p[f"{pre}.ffn.b2"] = _zeros((H,))
        p["ln_f.g"] = _ones((H,))
        p["ln_f.b"] = _zeros((H,))

    def forward(self, x, positions: np.ndarray | None = None,
                attention_weights: list | None = None) -> StepPrediction:
        """Predictions at every position of ``(B, T, D)`` inputs.

        ``positions`` are embedding indices of shape ``(B, T)``; by default
        ``0..T-1``. The output at position t only depends on inputs at ``<= t``.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected (B, T, D) input, got {x.shape}")
        B, T, _ = x.shape
        P = self.config.max_positions
        if positions is None:
            if T > P:
                raise ConfigurationError(f"sequence length {T} exceeds max_positions {P}")
            positions = np.broadcast_to(np.arange(T), (B, T))
        positions = np.asarray(positions)
        if positions.size and (positions.max() >= P or positions.min() < 0):
            raise ConfigurationError(f"position index outside 0..{P - 1}")
        p = self.params
        h = linear(Tensor(x), p["in.W"], p["in.b"]) + p["pos"][positions]
        mask = _causal_mask(T)
        for layer in range(self.config.layers):
            h = transformer_block(h, p, f"block{layer}", self.config.heads, mask, attention_weights)
        h = ad.layer_norm(h, p["ln_f.g"], p["ln_f.b"])
        return self.heads(h)


def build_model(config: ModelConfig) -> SequenceModel:
    return LSTMSeq2Seq(config) if config.kind == "lstm_seq2seq" else EthosLite(config)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count implied by a config."""
    D, H, n = config.input_dim, config.hidden_dim, config.n_numeric
    heads = H * n + n + sum(H * k + k for k in config.level_counts)
    if config.kind == "lstm_seq2seq":
        return 2 * 4 * (D * H + H * H + H) + heads
    F = config.ffn_mult * H
    block = 2 * H + 4 * (H * H + H) + 2 * H + (H * F + F) + (F * H + H)
    return D * H + H + config.max_positions * H + config.layers * block + 2 * H + heads


# ---------------------------------------------------------------------------
# functional entry points


def seq2seq_forward(encoder_steps, decoder_inputs, model: LSTMSeq2Seq) -> StepPrediction:
    """Encoder over ``encoder_steps`` then a teacher-forced decoder pass.

    Accepts a single sequence as ``(T, D)`` matrices or a batch as ``(B, T, D)``.
    """
    enc = np.asarray(encoder_steps, dtype=np.float64)
    dec = np.asarray(decoder_inputs, dtype=np.float64)
    if enc.ndim == 2:
        enc, dec = enc[None], dec.reshape((1,) + dec.shape)
    if enc.shape[1] == 0:
        raise ContractError("encoder input is empty")
    return model.forward(enc, None, dec)


def transformer_forward(steps, model: EthosLite) -> StepPrediction:
    x = np.asarray(steps, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return model.forward(x)


# ---------------------------------------------------------------------------
# rollout


@dataclass
class SynthWindow:
    numeric: np.ndarray  # (B, horizon, n_numeric), schema units
    categorical: np.ndarray  # (B, horizon, n_categorical), level indices


def _decode_prediction(numeric_z: np.ndarray, logits: Sequence[np.ndarray], decoding: str,
                       rng: np.random.Generator, residual_std: np.ndarray):
    if decoding == "argmax":
        return numeric_z, np.stack([l.argmax(axis=-1) for l in logits], axis=-1) if logits \
            else np.zeros((numeric_z.shape[0], 0), dtype=np.int64)
    z = numeric_z + residual_std * rng.standard_normal(numeric_z.shape)
    cats = []
    for l in logits:
        probs = ad.softmax_array(l)
        u = rng.random(l.shape[0])
        idx = (np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1)
        cats.append(np.minimum(idx, l.shape[-1] - 1))
    cat = np.stack(cats, axis=-1) if cats else np.zeros((numeric_z.shape[0], 0), dtype=np.int64)
    return z, cat


def _encode_z(z: np.ndarray, cat: np.ndarray, level_counts: Sequence[int], dt_channel: float) -> np.ndarray:
    parts = [z]
    for j, k in enumerate(level_counts):
        parts.append(np.eye(k)[cat[:, j]])
    parts.append(np.full((z.shape[0], 1), dt_channel))
    return np.concatenate(parts, axis=-1)


def rollout(model: SequenceModel, observation_steps, horizon: int, schema: FeatureSchema,
            normalizer: Normalizer, decoding: str = "argmax", seed: int = 0) -> SynthWindow:
    """Generate ``horizon`` steps after a complete, encoded observation window.

    ``observation_steps`` is ``(B, T_obs, D)`` (or a single ``(T_obs, D)``
    window). Categorical features are decoded by argmax, or sampled from the
    softmax when ``decoding="sample"``; sampled decoding also adds Gaussian
    noise with the model's one-step residual scale to numeric outputs. Every
    generated step is re-encoded with a gap of 1 and fed back.
    """
    if horizon <= 0:
        raise ContractError("horizon must be positive")
    if decoding not in ("argmax", "sample"):
        raise ConfigurationError(f"unknown decoding {decoding!r}")
    obs = np.asarray(observation_steps, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    if obs.shape[-1] != model.config.input_dim or obs.shape[1] == 0:
        raise ShapeError(f"observation window has shape {obs.shape}")
    rng = np.random.default_rng(seed)
    B = obs.shape[0]
    dt_one = 1.0 / model.g_max
    levels = model.config.level_counts
    out_z = np.zeros((B, horizon, model.config.n_numeric))
    out_c = np.zeros((B, horizon, len(levels)), dtype=np.int64)
    with no_grad():
        if isinstance(model, LSTMSeq2Seq):
            h, c = model.encode(obs)
            dec_in = obs[:, -1].copy()
            dec_in[:, -1] = dt_one
            for s in range(horizon):
                h, c = model._cell("dec", Tensor(dec_in), h, c)
                pred = model.heads(h)
                z, cat = _decode_prediction(pred.numeric.data, [l.data for l in pred.categorical_logits],
                                            decoding, rng, model.residual_std)
                out_z[:, s], out_c[:, s] = z, cat
                dec_in = _encode_z(z, cat, levels, dt_one)
        else:
            context = obs.shape[1]
            seq = obs.copy()
            for s in range(horizon):
                window = seq[:, -context:].copy()
                window[:, 0, -1] = 0.0
                pred = model.forward(window)
                z, cat = _decode_prediction(pred.numeric.data[:, -1],
                                            [l.data[:, -1] for l in pred.categorical_logits],
                                            decoding, rng, model.residual_std)
                out_z[:, s], out_c[:, s] = z, cat
                seq = np.concatenate([seq, _encode_z(z, cat, levels, dt_one)[:, None]], axis=1)
    return SynthWindow(normalizer.inverse(out_z), out_c)


# ---------------------------------------------------------------------------
# serialization


def save_model(model: SequenceModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_to_bytes(model: SequenceModel) -> bytes:
    """Header (config echo as JSON) followed by named little-endian float64 tensors."""
    index, offset, blobs = [], 0, []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "g_max": model.g_max,
              "residual_std": [float(x) for x in model.residual_std], "tensors": index}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def load_model(path) -> SequenceModel:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(blob: bytes) -> SequenceModel:
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ContractError("not a model container")
    (n,) = struct.unpack("<Q", blob[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    header = json.loads(blob[start:start + n].decode("utf-8"))
    body = blob[start + n:]
    cfg = ModelConfig(**header["config"])
    model = build_model(cfg)
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(model.params):
        raise ShapeError("stored tensor names do not match the configured architecture")
    for name, p in model.params.items():
        e = entries[name]
        if tuple(e["shape"]) != p.shape:
            raise ShapeError(f"{name}: stored shape {tuple(e['shape'])}, config implies {p.shape}")
        count = int(np.prod(p.shape))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        p.data = arr.astype(np.float64).reshape(p.shape)
    model.g_max = int(header["g_max"])
    model.residual_std = np.asarray(header["residual_std"], dtype=np.float64)
    return model
