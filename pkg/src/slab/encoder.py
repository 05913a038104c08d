"""Transformer encoder with MLM and NSP heads.

Architecture follows the BERT lineage: learned absolute position embeddings,
a 2-entry segment table, post-layer-norm blocks, GELU feed-forward, and an
MLM output projection tied to the transpose of the token embedding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .bpe import EncodedPair, Vocab
from .util import derive_seed

ATTENTION_MASK_BIAS = -1e9  # additive score for PAD keys; underflows to exactly 0 mass


class FingerprintMismatchError(ValueError):
    """Raised when a batch's vocabulary does not match the checkpoint's."""


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    hidden: int
    heads: int
    intermediate: int
    vocab_size: int
    max_positions: int
    dropout: float = 0.1
    preset: str = "custom"

    def __post_init__(self):
        if min(self.layers, self.hidden, self.heads, self.intermediate,
               self.vocab_size, self.max_positions) <= 0:
            raise ValueError("EncoderConfig: all size fields must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(f"EncoderConfig: hidden {self.hidden} not divisible by "
                             f"heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("EncoderConfig: dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def preset_config(name: str, *, vocab_size: int | None = None,
                  max_positions: int | None = None, dropout: float = 0.1) -> EncoderConfig:
    """Named architecture presets. BASE/SMALL carry the published shapes;
    TINY exists for tests; the bench-* shapes mirror common efficiency
    baselines (shapes only, not those models' training schemes)."""
    shapes = {
        "base": (12, 768, 12, 30000, 512),
        "small": (6, 512, 8, 30000, 512),
        "tiny": (2, 64, 2, 512, 64),
        "bench-base": (12, 768, 12, 30000, 512),
        "bench-small": (6, 512, 8, 30000, 512),
        "bench-distil": (6, 768, 12, 30000, 512),
        "bench-albert": (12, 768, 12, 30000, 512),
        "bench-albert-large": (24, 1024, 16, 30000, 512),
    }
    if name not in shapes:
        raise ValueError(f"unknown preset '{name}' (choose from {sorted(shapes)})")
    layers, hidden, heads, v, p = shapes[name]
    return EncoderConfig(layers=layers, hidden=hidden, heads=heads,
                         intermediate=4 * hidden,
                         vocab_size=vocab_size if vocab_size is not None else v,
                         max_positions=max_positions if max_positions is not None else p,
                         dropout=dropout, preset=name)


def tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every weight tensor's name and shape, fully determined by the config."""
    h, i, v, p = config.hidden, config.intermediate, config.vocab_size, config.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "emb.token": (v, h),
        "emb.position": (p, h),
        "emb.segment": (2, h),
        "emb.norm.gain": (h,),
        "emb.norm.bias": (h,),
    }
    for l in range(config.layers):
        pre = f"layer{l}."
        for proj in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{proj}.w"] = (h, h)
            shapes[pre + f"attn.{proj}.b"] = (h,)
        shapes[pre + "attn.norm.gain"] = (h,)
        shapes[pre + "attn.norm.bias"] = (h,)
        shapes[pre + "ffn.w1"] = (h, i)
        shapes[pre + "ffn.b1"] = (i,)
        shapes[pre + "ffn.w2"] = (i, h)
        shapes[pre + "ffn.b2"] = (h,)
        shapes[pre + "ffn.norm.gain"] = (h,)
        shapes[pre + "ffn.norm.bias"] = (h,)
    shapes.update({
        "mlm.dense.w": (h, h),
        "mlm.dense.b": (h,),
        "mlm.norm.gain": (h,),
        "mlm.norm.bias": (h,),
        "mlm.bias": (v,),          # output projection itself is tied to emb.token
        "nsp.pool.w": (h, h),
        "nsp.pool.b": (h,),
        "nsp.cls.w": (h, 2),
        "nsp.cls.b": (2,),
    })
    return shapes


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form parameter count.

    embeddings:  V*H + P*H + 2*H (segment) + 2*H (norm)
    per layer:   4*(H*H + H) attention projections + 2*H attention norm
                 + (H*I + I) + (I*H + H) feed-forward + 2*H ffn norm
    MLM head:    H*H + H dense + 2*H norm + V output bias (projection tied)
    NSP head:    H*H + H pooler + 2*H + 2 classifier
    """
    h, i, v, p, t = (config.hidden, config.intermediate, config.vocab_size,
                     config.max_positions, config.layers)
    emb = v * h + p * h + 2 * h + 2 * h
    per_layer = 4 * (h * h + h) + 2 * h + (h * i + i) + (i * h + h) + 2 * h
    mlm = h * h + h + 2 * h + v
    nsp = h * h + h + (h * 2 + 2)
    return emb + t * per_layer + mlm + nsp


def init_weights(config: EncoderConfig, seed: int) -> dict[str, T.Tensor]:
    """Seeded initialisation: clipped normal (std 0.02) for projections and
    embeddings, ones for norm gains, zeros for biases."""
    rng = np.random.Generator(np.random.PCG64(derive_seed("init", seed)))
    weights: dict[str, T.Tensor] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm.gain"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith((".b", ".b1", ".b2", "norm.bias")) or name == "mlm.bias":
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04).astype(np.float32)
        weights[name] = T.Tensor(data, requires_grad=True, dtype=np.float32)
    return weights


def zero_weights(config: EncoderConfig) -> dict[str, T.Tensor]:
    """All-zero weights (norm gains included); useful for uniform-output tests."""
    return {name: T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, dtype=np.float32)
            for name, shape in tensor_shapes(config).items()}


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class EncodedBatch:
    ids: np.ndarray          # [B, S] int64
    segments: np.ndarray     # [B, S] int64
    mask: np.ndarray         # [B, S] float, 1 on real positions
    vocab_fingerprint: str

    @classmethod
    def from_pairs(cls, pairs: Sequence[EncodedPair], vocab: Vocab | str) -> "EncodedBatch":
        if not pairs:
            raise ValueError("EncodedBatch: empty pair list")
        lengths = {p.length for p in pairs}
        if len(lengths) != 1:
            raise ValueError(f"EncodedBatch: all sequences must share one framed length, got {sorted(lengths)}")
        fp = vocab.fingerprint if isinstance(vocab, Vocab) else vocab
        return cls(
            ids=np.array([p.ids for p in pairs], dtype=np.int64),
            segments=np.array([p.segment_ids for p in pairs], dtype=np.int64),
            mask=np.array([p.attention_mask for p in pairs], dtype=np.float32),
            vocab_fingerprint=fp,
        )

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]


@dataclass
class EncoderOutput:
    hidden: T.Tensor                      # [B, S, H]
    cls: T.Tensor                         # [B, H]
    attentions: list[np.ndarray] | None   # per layer [B, AH, S, S] when requested


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _heads_split(x: T.Tensor, batch: int, seq: int, heads: int, dim: int) -> T.Tensor:
    return T.transpose(T.reshape(x, (batch, seq, heads, dim)), (0, 2, 1, 3))


def forward(checkpoint, batch: EncodedBatch, *, dropout_seed: int | None = None,
            return_attention: bool = False) -> EncoderOutput:
    """Full encoder pass. Dropout is active only when ``dropout_seed`` is given
    (each dropout site derives its own deterministic sub-seed)."""
    config: EncoderConfig = checkpoint.config
    w = checkpoint.weights
    if batch.vocab_fingerprint != checkpoint.vocab_fingerprint:
        raise FingerprintMismatchError(
            f"batch vocab fingerprint {batch.vocab_fingerprint} does not match "
            f"checkpoint's {checkpoint.vocab_fingerprint}")
    b, s = batch.ids.shape
    if s > config.max_positions:
        raise ValueError(f"sequence length {s} exceeds max_positions {config.max_positions}")
    if batch.ids.max(initial=0) >= config.vocab_size:
        raise ValueError("token id out of range for checkpoint vocabulary")

    rate = config.dropout if dropout_seed is not None else 0.0
    site = [0]

    def drop(x: T.Tensor) -> T.Tensor:
        if rate == 0.0:
            return x
        site[0] += 1
        return T.dropout(x, rate, derive_seed("drop", dropout_seed, site[0]))

    x = T.embedding(w["emb.token"], batch.ids)
    x = x + T.embedding(w["emb.position"], np.broadcast_to(np.arange(s), (b, s)))
    x = x + T.embedding(w["emb.segment"], batch.segments)
    x = T.layer_norm(x, w["emb.norm.gain"], w["emb.norm.bias"])
    x = drop(x)

    # additive key mask: real keys 0, PAD keys a large negative score
    key_bias = T.Tensor(((1.0 - batch.mask) * ATTENTION_MASK_BIAS)[:, None, None, :],
                        dtype=x.data.dtype)
    scale = 1.0 / float(np.sqrt(config.head_dim))
    attentions: list[np.ndarray] = []

    for l in range(config.layers):
        pre = f"layer{l}."
        q = _heads_split(x @ w[pre + "attn.q.w"] + w[pre + "attn.q.b"], b, s, config.heads, config.head_dim)
        k = _heads_split(x @ w[pre + "attn.k.w"] + w[pre + "attn.k.b"], b, s, config.heads, config.head_dim)
        v = _heads_split(x @ w[pre + "attn.v.w"] + w[pre + "attn.v.b"], b, s, config.heads, config.head_dim)
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * scale + key_bias
        probs = T.softmax(scores, axis=-1)
        if return_attention:
            attentions.append(probs.data.copy())
        probs = drop(probs)
        ctx = T.reshape(T.transpose(probs @ v, (0, 2, 1, 3)), (b, s, config.hidden))
        attn_out = drop(ctx @ w[pre + "attn.o.w"] + w[pre + "attn.o.b"])
        x = T.layer_norm(x + attn_out, w[pre + "attn.norm.gain"], w[pre + "attn.norm.bias"])
        gelu_ffn = T.gelu(x @ w[pre + "ffn.w1"] + w[pre + "ffn.b1"])
        ffn_out = drop(gelu_ffn @ w[pre + "ffn.w2"] + w[pre + "ffn.b2"])
        x = T.layer_norm(x + ffn_out, w[pre + "ffn.norm.gain"], w[pre + "ffn.norm.bias"])

    cls = x[:, 0, :]
    return EncoderOutput(hidden=x, cls=cls, attentions=attentions if return_attention else None)


def mlm_logits(hidden: T.Tensor, positions: Sequence[tuple[int, int]], checkpoint) -> T.Tensor:
    """Vocabulary logits at the requested (batch, seq) positions -> [M, V]."""
    w = checkpoint.weights
    b, s, h = hidden.shape
    bi = np.array([p[0] for p in positions], dtype=np.int64)
    si = np.array([p[1] for p in positions], dtype=np.int64)
    if len(bi) and (bi.min() < 0 or bi.max() >= b or si.min() < 0 or si.max() >= s):
        raise ValueError("mlm_logits: position out of range")
    picked = T.gather_positions(hidden, bi, si)
    dense = T.gelu(picked @ w["mlm.dense.w"] + w["mlm.dense.b"])
    dense = T.layer_norm(dense, w["mlm.norm.gain"], w["mlm.norm.bias"])
    return dense @ T.transpose(w["emb.token"]) + w["mlm.bias"]


def nsp_logits(cls: T.Tensor, checkpoint) -> T.Tensor:
    """2-class is-next/not-next logits from [CLS] vectors -> [B, 2]."""
    w = checkpoint.weights
    pooled = T.tanh(cls @ w["nsp.pool.w"] + w["nsp.pool.b"])
    return pooled @ w["nsp.cls.w"] + w["nsp.cls.b"]
