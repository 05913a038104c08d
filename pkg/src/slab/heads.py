"""Downstream architectures: sigmoid multi-label head, attention pooling over
independently encoded facts, and a linear-chain CRF tagger.

The CRF has no explicit BOS/EOS rows; boundary transitions are simply
omitted, which keeps the parameterization minimal without losing expressive
power for this use.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .bpe import Vocab, encode, frame_pair
from .encoder import EncodedBatch, forward
from .util import derive_seed


# ---------------------------------------------------------------------------
# multi-label classification
# ---------------------------------------------------------------------------

@dataclass
class MultiLabelHead:
    weight: T.Tensor     # [H, L]
    bias: T.Tensor       # [L]

    @classmethod
    def init(cls, hidden: int, num_labels: int, seed: int) -> "MultiLabelHead":
        if num_labels < 1:
            raise ValueError("MultiLabelHead: need at least one label")
        rng = np.random.Generator(np.random.PCG64(derive_seed("mlhead", seed)))
        w = np.clip(rng.normal(0.0, 0.02, size=(hidden, num_labels)), -0.04, 0.04)
        return cls(weight=T.Tensor(w.astype(np.float32), requires_grad=True),
                   bias=T.Tensor(np.zeros(num_labels, dtype=np.float32), requires_grad=True))

    @property
    def num_labels(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, T.Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def multilabel_logits(cls_vec: T.Tensor, head: MultiLabelHead) -> T.Tensor:
    single = cls_vec.ndim == 1
    x = T.reshape(cls_vec, (1, -1)) if single else cls_vec
    logits = x @ head.weight + head.bias
    return T.reshape(logits, (head.num_labels,)) if single else logits


def multilabel_scores(cls_vec: T.Tensor, head: MultiLabelHead) -> T.Tensor:
    """Per-label probabilities in (0, 1) from [CLS] vector(s)."""
    return T.sigmoid(multilabel_logits(cls_vec, head))


def multilabel_loss(cls_vec: T.Tensor, head: MultiLabelHead, targets) -> T.Tensor:
    """Per-instance sum of per-label binary cross-entropies, averaged over the
    batch when given more than one instance."""
    targets = np.asarray(targets)
    expected = (head.num_labels,) if cls_vec.ndim == 1 else (cls_vec.shape[0], head.num_labels)
    if targets.shape != expected:
        raise ValueError(f"multilabel_loss: targets shape {targets.shape}, expected {expected}")
    return T.multilabel_bce(multilabel_logits(cls_vec, head), targets)


# ---------------------------------------------------------------------------
# hierarchical document encoding (attention over per-fact [CLS] embeddings)
# ---------------------------------------------------------------------------

@dataclass
class HierPooler:
    weight: T.Tensor     # [H, H]
    bias: T.Tensor       # [H]
    context: T.Tensor    # [H]

    @classmethod
    def init(cls, hidden: int, seed: int) -> "HierPooler":
        rng = np.random.Generator(np.random.PCG64(derive_seed("pooler", seed)))
        def mat(shape):
            return T.Tensor(np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04)
                            .astype(np.float32), requires_grad=True)
        return cls(weight=mat((hidden, hidden)),
                   bias=T.Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
                   context=mat((hidden,)))

    def params(self) -> dict[str, T.Tensor]:
        return {"pooler.weight": self.weight, "pooler.bias": self.bias,
                "pooler.context": self.context}


def attention_pool(fact_vectors: T.Tensor, pooler: HierPooler) -> tuple[T.Tensor, T.Tensor]:
    """Attention-weighted sum of fact embeddings [N, H] -> (doc vector [H],
    attention weights [N] summing to 1)."""
    n = fact_vectors.shape[0]
    if n == 0:
        raise ValueError("attention_pool: need at least one fact")
    u = T.tanh(fact_vectors @ pooler.weight + pooler.bias)            # [N, H]
    scores = T.reshape(u @ T.reshape(pooler.context, (-1, 1)), (n,))  # [N]
    alpha = T.softmax(scores, axis=-1)
    doc = T.reshape(T.reshape(alpha, (1, n)) @ fact_vectors, (-1,))   # [H]
    return doc, alpha


def hier_encode(fact_texts: Sequence[str], checkpoint, vocab: Vocab, pooler: HierPooler,
                *, max_len: int = 64, max_facts: int = 64) -> tuple[T.Tensor, T.Tensor]:
    """Encode each fact independently to its [CLS] vector, then attention-pool.
    Returns (document vector, attention weights)."""
    n = len(fact_texts)
    if n == 0:
        raise ValueError("hier_encode: need at least one fact")
    if n > max_facts:
        raise ValueError(f"hier_encode: {n} facts exceeds the configured maximum {max_facts}")
    pairs = [frame_pair(encode(t, vocab)[:max_len - 2], None, max_len) for t in fact_texts]
    batch = EncodedBatch.from_pairs(pairs, vocab)
    out = forward(checkpoint, batch)
    return attention_pool(out.cls, pooler)


# ---------------------------------------------------------------------------
# linear-chain CRF
# ---------------------------------------------------------------------------

@dataclass
class TagLattice:
    """Per-sequence emission scores [T, K] and shared transitions [K, K]."""

    emissions: T.Tensor
    transitions: T.Tensor

    def __post_init__(self):
        if self.emissions.ndim != 2 or self.transitions.ndim != 2:
            raise ValueError("TagLattice: emissions [T, K] and transitions [K, K] required")
        k = self.emissions.shape[1]
        if k < 1 or self.transitions.shape != (k, k):
            raise ValueError(f"TagLattice: transitions must be [{k}, {k}]")
        if not (np.isfinite(self.emissions.data).all()
                and np.isfinite(self.transitions.data).all()):
            raise ValueError("TagLattice: scores must be finite")

    @property
    def steps(self) -> int:
        return self.emissions.shape[0]

    @property
    def num_tags(self) -> int:
        return self.emissions.shape[1]


def crf_log_partition(lattice: TagLattice) -> T.Tensor:
    """log sum over all K^T paths of exp(path score), by the forward recursion
    in log space."""
    if lattice.steps < 1:
        raise ValueError("crf_log_partition: need at least one step")
    k = lattice.num_tags
    alpha = lattice.emissions[0, :]
    for t in range(1, lattice.steps):
        inner = T.reshape(alpha, (k, 1)) + lattice.transitions   # [K_prev, K_cur]
        alpha = lattice.emissions[t, :] + T.logsumexp(inner, axis=0)
    return T.logsumexp(alpha, axis=-1)


def crf_score(lattice: TagLattice, path: Sequence[int]) -> T.Tensor:
    """Score of one tag path: emissions plus chained transitions, accumulated
    in recursion order so a K=1 lattice matches the partition bit-for-bit."""
    path = list(path)
    if len(path) != lattice.steps:
        raise ValueError(f"crf_score: path length {len(path)} != steps {lattice.steps}")
    if any(not 0 <= y < lattice.num_tags for y in path):
        raise ValueError("crf_score: tag out of range")
    score = lattice.emissions[0, path[0]]
    for t in range(1, lattice.steps):
        score = lattice.emissions[t, path[t]] + (score + lattice.transitions[path[t - 1], path[t]])
    return score


def crf_nll(lattice: TagLattice, gold: Sequence[int]) -> T.Tensor:
    """Negative log-likelihood: log-partition minus the gold path's score."""
    return crf_log_partition(lattice) - crf_score(lattice, gold)


def crf_viterbi(lattice: TagLattice) -> tuple[list[int], float]:
    """Best-scoring tag path; ties resolve toward the lowest tag index at the
    latest step where the candidates differ."""
    emit = np.asarray(lattice.emissions.data, dtype=np.float64)
    trans = np.asarray(lattice.transitions.data, dtype=np.float64)
    steps, k = emit.shape
    delta = emit[0].copy()
    back = np.zeros((steps, k), dtype=np.int64)
    for t in range(1, steps):
        cand = delta[:, None] + trans            # [prev, cur]
        back[t] = np.argmax(cand, axis=0)        # argmax takes the lowest index on ties
        delta = cand[back[t], np.arange(k)] + emit[t]
    last = int(np.argmax(delta))
    path = [last]
    for t in range(steps - 1, 0, -1):
        last = int(back[t, last])
        path.append(last)
    path.reverse()
    return path, float(delta[path[-1]])
