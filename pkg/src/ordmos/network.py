"""Dual-branch MOS model over precomputed embeddings.

Audio branch: temporal encoder (single pre-norm transformer layer or BiLSTM)
over the audio embedding rows, pooled, then a two-layer MLP emits musical
impression logits. Alignment branch: audio and text streams are projected to
a common width and fused with multi-head cross-attention (text rows are the
queries, audio rows the keys and values); the fused sequence is pooled and a
second MLP emits the alignment logits.

Variants: ``dora`` cross-attends the temporal encoder's output; ``decoupled``
cross-attends a projection of the raw audio embeddings instead, so the
temporal block sits outside the alignment path and receives gradients only
from the impression loss; ``coral`` keeps the dora wiring but both heads emit
K-1 cumulative logits decoded by threshold counting.

Parameters are named float64 tensors in a dict whose insertion order is the
serialization order. All randomness is confined to init_params(seed).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import labels
from .dataio import atomic_write_bytes
from .tensor import (
    Tensor,
    concat,
    dropout,
    layernorm,
    mean,
    relu,
    sigmoid,
    slice_,
    softmax,
    tanh,
    transpose,
)

__all__ = [
    "ModelConfig",
    "Prediction",
    "init_params",
    "forward",
    "transformer_layer",
    "bilstm_layer",
    "cross_attention",
    "attention_pool",
    "mean_pool",
    "mlp_head",
    "temporal_param_names",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("dora", "coral", "decoupled")
TEMPORALS = ("transformer", "bilstm")
POOLINGS = ("mean", "attention")


@dataclass(frozen=True)
class ModelConfig:
    d_audio: int
    d_text: int
    variant: str = "dora"
    temporal: str = "transformer"
    pooling: str = "attention"
    d_common: int = 256
    n_heads: int = 4
    d_hidden: int = 128
    d_bilstm: int = 128
    K: int = 20
    lo: float = 1.0
    hi: float = 5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.temporal not in TEMPORALS:
            raise ValueError(f"unknown temporal encoder {self.temporal!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.d_common % self.n_heads != 0:
            raise ValueError(f"d_common {self.d_common} not divisible by n_heads {self.n_heads}")
        if self.temporal == "transformer" and self.d_audio % self.n_heads != 0:
            raise ValueError(f"d_audio {self.d_audio} not divisible by n_heads {self.n_heads}")
        if self.K < 2:
            raise ValueError("K must be >= 2")

    @property
    def enc_width(self) -> int:
        """Row width of the temporal encoder output."""
        return self.d_audio if self.temporal == "transformer" else 2 * self.d_bilstm

    @property
    def n_out(self) -> int:
        """Head output arity: K logits, or K-1 cumulative logits for coral."""
        return self.K - 1 if self.variant == "coral" else self.K

    def bins(self) -> labels.ScoreBins:
        return labels.make_bins(self.K, self.lo, self.hi)

    def to_dict(self) -> dict:
        return {
            "d_audio": self.d_audio,
            "d_text": self.d_text,
            "variant": self.variant,
            "temporal": self.temporal,
            "pooling": self.pooling,
            "d_common": self.d_common,
            "n_heads": self.n_heads,
            "d_hidden": self.d_hidden,
            "d_bilstm": self.d_bilstm,
            "K": self.K,
            "lo": self.lo,
            "hi": self.hi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Prediction:
    """One clip's raw head outputs plus decoded scalar scores."""

    mi_logits: Tensor
    ta_logits: Tensor
    mi_score: float
    ta_score: float


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seeded parameter store; linear maps uniform in +/- 1/sqrt(fan_in),
    biases and pooling queries start at zero (zero query = mean pooling)."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def linear(prefix: str, d_in: int, d_out: int) -> None:
        p[f"{prefix}.w"] = _uniform(rng, d_in, (d_in, d_out))
        p[f"{prefix}.b"] = np.zeros(d_out)

    if cfg.temporal == "transformer":
        d = cfg.d_audio
        for name in ("wq", "wk", "wv", "wo"):
            p[f"temporal.attn.{name}"] = _uniform(rng, d, (d, d))
            p[f"temporal.attn.{name[1]}b"] = np.zeros(d)
        p["temporal.ffn.w1"] = _uniform(rng, d, (d, 4 * d))
        p["temporal.ffn.b1"] = np.zeros(4 * d)
        p["temporal.ffn.w2"] = _uniform(rng, 4 * d, (4 * d, d))
        p["temporal.ffn.b2"] = np.zeros(d)
    else:
        h = cfg.d_bilstm
        for direction in ("fwd", "bwd"):
            p[f"temporal.{direction}.wx"] = _uniform(rng, cfg.d_audio, (cfg.d_audio, 4 * h))
            p[f"temporal.{direction}.wh"] = _uniform(rng, h, (h, 4 * h))
            p[f"temporal.{direction}.b"] = np.zeros(4 * h)

    if cfg.pooling == "attention":
        p["mi_pool.q"] = np.zeros(cfg.enc_width)
    linear("mi_head.l1", cfg.enc_width, cfg.d_hidden)
    linear("mi_head.l2", cfg.d_hidden, cfg.n_out)

    ta_audio_in = cfg.d_audio if cfg.variant == "decoupled" else cfg.enc_width
    linear("ta_aproj", ta_audio_in, cfg.d_common)
    linear("ta_tproj", cfg.d_text, cfg.d_common)
    for name in ("wq", "wk", "wv", "wo"):
        p[f"cross.{name}"] = _uniform(rng, cfg.d_common, (cfg.d_common, cfg.d_common))
        p[f"cross.{name[1]}b"] = np.zeros(cfg.d_common)
    if cfg.pooling == "attention":
        p["ta_pool.q"] = np.zeros(cfg.d_common)
    linear("ta_head.l1", cfg.d_common, cfg.d_hidden)
    linear("ta_head.l2", cfg.d_hidden, cfg.n_out)

    return {k: Tensor(v) for k, v in p.items()}


def temporal_param_names(params: dict[str, Tensor]) -> list[str]:
    return [k for k in params if k.startswith("temporal.")]


def _c(x: float) -> Tensor:
    return Tensor(np.float64(x))


def _multi_head(
    params: dict[str, Tensor],
    prefix: str,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    n_heads: int,
) -> Tensor:
    """Projected multi-head scaled-dot attention with an output projection."""
    q = queries @ params[f"{prefix}.wq"] + params[f"{prefix}.qb"]
    k = keys @ params[f"{prefix}.wk"] + params[f"{prefix}.kb"]
    v = values @ params[f"{prefix}.wv"] + params[f"{prefix}.vb"]
    d = q.data.shape[1]
    d_head = d // n_heads
    scale = _c(1.0 / np.sqrt(d_head))
    heads = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = slice_(q, 1, lo, hi)
        kh = slice_(k, 1, lo, hi)
        vh = slice_(v, 1, lo, hi)
        attn = softmax((qh @ transpose(kh)) * scale, axis=1)
        heads.append(attn @ vh)
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return merged @ params[f"{prefix}.wo"] + params[f"{prefix}.ob"]


def transformer_layer(params: dict[str, Tensor], z: Tensor, n_heads: int) -> Tensor:
    """Pre-norm self-attention + residual, then pre-norm FFN (d -> 4d -> d) + residual.

    No positional encoding, so permuting input rows permutes output rows."""
    d = z.data.shape[1]
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    n1 = layernorm(z)
    h1 = z + _multi_head(params, "temporal.attn", n1, n1, n1, n_heads)
    n2 = layernorm(h1)
    ff = relu(n2 @ params["temporal.ffn.w1"] + params["temporal.ffn.b1"])
    return h1 + ff @ params["temporal.ffn.w2"] + params["temporal.ffn.b2"]


def _lstm_direction(
    params: dict[str, Tensor], prefix: str, rows: list[Tensor], hidden: int
) -> list[Tensor]:
    """One LSTM sweep over rows (already in scan order); returns h_t per step."""
    wx = params[f"{prefix}.wx"]
    wh = params[f"{prefix}.wh"]
    b = params[f"{prefix}.b"]
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    outs = []
    for x in rows:
        gates = x @ wx + h @ wh + b
        gi = sigmoid(slice_(gates, 1, 0, hidden))
        gf = sigmoid(slice_(gates, 1, hidden, 2 * hidden))
        gg = tanh(slice_(gates, 1, 2 * hidden, 3 * hidden))
        go = sigmoid(slice_(gates, 1, 3 * hidden, 4 * hidden))
        c = gf * c + gi * gg
        h = go * tanh(c)
        outs.append(h)
    return outs


def bilstm_layer(params: dict[str, Tensor], z: Tensor, hidden: int) -> Tensor:
    """Forward and backward recurrences, hidden states concatenated per step."""
    t_len = z.data.shape[0]
    rows = [slice_(z, 0, t, t + 1) for t in range(t_len)]
    f_out = _lstm_direction(params, "temporal.fwd", rows, hidden)
    b_out = _lstm_direction(params, "temporal.bwd", rows[::-1], hidden)[::-1]
    f_seq = f_out[0] if t_len == 1 else concat(f_out, axis=0)
    b_seq = b_out[0] if t_len == 1 else concat(b_out, axis=0)
    return concat([f_seq, b_seq], axis=1)


def cross_attention(
    params: dict[str, Tensor], text: Tensor, audio: Tensor, n_heads: int
) -> Tensor:
    """Text rows query the audio rows; output has one row per text row."""
    if text.data.shape[1] != audio.data.shape[1]:
        raise ValueError(
            f"common-width mismatch: text {text.data.shape[1]} vs audio {audio.data.shape[1]}"
        )
    return _multi_head(params, "cross", text, audio, audio, n_heads)


def mean_pool(seq: Tensor) -> Tensor:
    return mean(seq, axis=0)


def attention_pool(params: dict[str, Tensor], name: str, seq: Tensor) -> Tensor:
    """Softmax(seq . q)-weighted row sum; zero query collapses to the mean."""
    scores = seq @ params[f"{name}.q"]
    weights = softmax(scores, axis=0)
    return weights @ seq


def mlp_head(params: dict[str, Tensor], prefix: str, v: Tensor) -> Tensor:
    h = relu(v @ params[f"{prefix}.l1.w"] + params[f"{prefix}.l1.b"])
    return h @ params[f"{prefix}.l2.w"] + params[f"{prefix}.l2.b"]


def _pool(cfg: ModelConfig, params: dict[str, Tensor], name: str, seq: Tensor) -> Tensor:
    if cfg.pooling == "attention":
        return attention_pool(params, name, seq)
    return mean_pool(seq)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_logits(cfg: ModelConfig, logits: np.ndarray) -> float:
    bins = cfg.bins()
    if cfg.variant == "coral":
        return labels.decode_coral(_sigmoid_np(logits), bins)
    z = logits - logits.max()
    probs = np.exp(z)
    probs /= probs.sum()
    return labels.decode_expected(probs, bins)


def forward(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    audio: np.ndarray,
    text: np.ndarray,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
) -> Prediction:
    """Run both branches on one clip. Records on the active tape, if any.

    Dropout, when enabled by the training loop, hits the pooled vectors just
    before each head. Reads params only, so concurrent forwards over one
    store are safe."""
    if audio.ndim != 2 or audio.shape[1] != cfg.d_audio:
        raise ValueError(f"audio shape {audio.shape} incompatible with d_audio={cfg.d_audio}")
    if text.ndim != 2 or text.shape[1] != cfg.d_text:
        raise ValueError(f"text shape {text.shape} incompatible with d_text={cfg.d_text}")
    z_a = Tensor(audio)
    z_t = Tensor(text)

    if cfg.temporal == "transformer":
        enc = transformer_layer(params, z_a, cfg.n_heads)
    else:
        enc = bilstm_layer(params, z_a, cfg.d_bilstm)

    mi_vec = _pool(cfg, params, "mi_pool", enc)
    if dropout_rate > 0.0 and dropout_rng is not None:
        mi_vec = dropout(mi_vec, dropout_rate, dropout_rng)
    mi_logits = mlp_head(params, "mi_head", mi_vec)

    ta_audio_src = z_a if cfg.variant == "decoupled" else enc
    a_proj = ta_audio_src @ params["ta_aproj.w"] + params["ta_aproj.b"]
    t_proj = z_t @ params["ta_tproj.w"] + params["ta_tproj.b"]
    fused = cross_attention(params, t_proj, a_proj, cfg.n_heads)
    ta_vec = _pool(cfg, params, "ta_pool", fused)
    if dropout_rate > 0.0 and dropout_rng is not None:
        ta_vec = dropout(ta_vec, dropout_rate, dropout_rng)
    ta_logits = mlp_head(params, "ta_head", ta_vec)

    return Prediction(
        mi_logits=mi_logits,
        ta_logits=ta_logits,
        mi_score=decode_logits(cfg, mi_logits.data),
        ta_score=decode_logits(cfg, ta_logits.data),
    )


def save_checkpoint(path: str, cfg: ModelConfig, params: dict[str, Tensor], extra: dict) -> None:
    """Single file: one JSON header line (config, manifest, extras), then the
    parameter arrays as raw little-endian float64 in manifest order."""
    manifest = [[k, list(v.data.shape)] for k, v in params.items()]
    header = json.dumps({"config": cfg.to_dict(), "manifest": manifest, "extra": extra})
    buf = io.BytesIO()
    buf.write(header.encode("utf-8"))
    buf.write(b"\n")
    for v in params.values():
        buf.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    head = json.loads(header_line.decode("utf-8"))
    cfg = ModelConfig.from_dict(head["config"])
    params: dict[str, Tensor] = {}
    offset = 0
    for name, shape in head["manifest"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[name] = Tensor(arr.copy())
        offset += n * 8
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} unexplained trailing bytes")
    return cfg, params, head.get("extra", {})
