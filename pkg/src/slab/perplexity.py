"""Pseudo-perplexity: exp of the mean masked-token negative log-likelihood
under repeated seeded maskings.

Definition pinned here: each round independently selects 15% of the
non-special positions of every text and replaces them with [MASK] (plain
replacement; the 80/10/10 corruption mix is a training recipe, not an
evaluation one). PPL = exp(mean over all masked positions of -log p(true)).
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .bpe import MASK_ID, NUM_SPECIALS, EncodedPair, Vocab, encode, frame_pair
from .encoder import EncodedBatch, forward, mlm_logits
from .util import derive_seed

MASKING_RATE = 0.15
DEFAULT_ROUNDS = 5


def _checkpoint_scorer(checkpoint):
    def scorer(batch: EncodedBatch, positions) -> np.ndarray:
        out = forward(checkpoint, batch)
        logits = mlm_logits(out.hidden, positions, checkpoint)
        return T.log_softmax(logits, axis=-1).data
    return scorer


def pseudo_perplexity(checkpoint, texts, vocab: Vocab, rounds: int = DEFAULT_ROUNDS,
                      seed: int = 0, batch_size: int = 16, scorer=None) -> float:
    """Deterministic pseudo-perplexity of ``texts`` under the checkpoint's MLM.

    ``scorer`` may replace the checkpoint's log-probability function (it maps
    an EncodedBatch plus (batch, seq) positions to [M, vocab] log-probs);
    tests use that hook for closed-form reference models.
    """
    if rounds < 1:
        raise ValueError("pseudo_perplexity: rounds must be >= 1")
    if scorer is None:
        scorer = _checkpoint_scorer(checkpoint)
    max_positions = checkpoint.config.max_positions if checkpoint is not None else 512

    encoded = [encode(t, vocab) for t in texts]
    longest = max((len(e) for e in encoded), default=0)
    seq_len = max(3, min(max_positions, longest + 2))
    pairs = [frame_pair(e[:seq_len - 2], None, seq_len) for e in encoded]

    # one masked variant per (round, text): (source pair, masked ids, positions, true ids)
    variants: list[tuple[EncodedPair, list[int], list[int], list[int]]] = []
    for r in range(rounds):
        for ti, pair in enumerate(pairs):
            rng = np.random.Generator(np.random.PCG64(derive_seed("ppl", seed, r, ti)))
            candidates = [i for i, t in enumerate(pair.ids) if t >= NUM_SPECIALS]
            if not candidates:
                continue
            hits = rng.random(len(candidates)) < MASKING_RATE
            selected = [pos for pos, hit in zip(candidates, hits) if hit]
            if not selected:
                selected = [candidates[int(rng.integers(0, len(candidates)))]]
            ids = list(pair.ids)
            true = [ids[pos] for pos in selected]
            for pos in selected:
                ids[pos] = MASK_ID
            variants.append((pair, ids, selected, true))
    if not variants:
        raise ValueError("pseudo_perplexity: texts contain no maskable positions")

    nll_sum, n_masked = 0.0, 0
    for lo in range(0, len(variants), batch_size):
        chunk = variants[lo:lo + batch_size]
        framed = [EncodedPair(ids=ids, segment_ids=list(src.segment_ids),
                              attention_mask=list(src.attention_mask))
                  for src, ids, _, _ in chunk]
        batch = EncodedBatch.from_pairs(framed, vocab)
        positions = [(bi, pos) for bi, (_, _, sel, _) in enumerate(chunk) for pos in sel]
        true_ids = np.array([t for _, _, _, true in chunk for t in true], dtype=np.int64)
        log_probs = scorer(batch, positions)
        nll_sum += float(-log_probs[np.arange(len(true_ids)), true_ids].sum())
        n_masked += len(true_ids)
    return float(np.exp(nll_sum / n_masked))
