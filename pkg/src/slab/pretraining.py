"""Pre-training: example generation (MLM masking, NSP pairing) and the
step-scheduled training loop behind the SC and FP strategies.

The example stream is random-access: item ``i`` is a pure function of
(pairs, seed, i), which is what makes checkpoint resume bit-identical and
lets tests replay any window of the stream.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adam import AdamHyper, AdamState, adam_step
from .bpe import NUM_SPECIALS, EncodedPair, Vocab, encode, frame_pair
from .checkpoint import Checkpoint, Lineage, load_checkpoint, save_checkpoint
from .corpus import DocumentStore
from .encoder import (EncodedBatch, EncoderConfig, FingerprintMismatchError, forward,
                      init_weights, mlm_logits, nsp_logits)
from .util import derive_seed

MASK_RATE = 0.15          # fraction of maskable positions selected
DUP_FACTOR = 10           # corpus stream duplication per epoch, each with fresh masks
IS_NEXT, NOT_NEXT = 0, 1

_SENT_RE = re.compile(r"(?<=[.!?])\s+")


class SingleDocumentError(ValueError):
    pass


class PretrainDivergedError(RuntimeError):
    pass


@dataclass
class TrainingExample:
    pair: EncodedPair
    mlm_labels: list[int]      # original id at masked positions, -1 elsewhere
    nsp_label: int | None      # IS_NEXT / NOT_NEXT, None when NSP is disabled

    @property
    def masked_positions(self) -> list[int]:
        return [i for i, l in enumerate(self.mlm_labels) if l != -1]


def mask_tokens(ids, rate: float, seed: int, vocab: Vocab) -> tuple[list[int], list[int]]:
    """BERT-style corruption: every non-special position is selected
    independently at ``rate``; selected positions become [MASK] with p=0.8,
    a uniformly random non-special token with p=0.1, unchanged with p=0.1."""
    ids = list(ids)
    labels = [-1] * len(ids)
    if rate == 0.0:
        return ids, labels
    rng = np.random.Generator(np.random.PCG64(derive_seed("mask", seed)))
    candidates = [i for i, t in enumerate(ids) if t >= NUM_SPECIALS]
    if not candidates:
        return ids, labels
    selected = rng.random(len(candidates)) < rate
    for pos, sel in zip(candidates, selected):
        if not sel:
            continue
        labels[pos] = ids[pos]
        action = rng.random()
        if action < 0.8:
            ids[pos] = 4  # MASK_ID
        elif action < 0.9:
            ids[pos] = int(rng.integers(NUM_SPECIALS, vocab.size))
        # else: keep the original token
    return ids, labels


def _mask_bounded(ids, rate: float, seed: int, vocab: Vocab) -> tuple[list[int], list[int]]:
    """mask_tokens plus the TrainingExample bounds: at most ceil(rate * maskable)
    positions and at least one when any maskable token exists."""
    original = list(ids)
    corrupted, labels = mask_tokens(ids, rate, seed, vocab)
    candidates = [i for i, t in enumerate(original) if t >= NUM_SPECIALS]
    if not candidates or rate == 0.0:
        return corrupted, labels
    chosen = [i for i, l in enumerate(labels) if l != -1]
    cap = math.ceil(rate * len(candidates))
    rng = np.random.Generator(np.random.PCG64(derive_seed("mask-bounds", seed)))
    if len(chosen) > cap:
        keep = set(rng.choice(len(chosen), size=cap, replace=False).tolist())
        for j, pos in enumerate(chosen):
            if j not in keep:
                corrupted[pos] = original[pos]
                labels[pos] = -1
    elif not chosen:
        pos = candidates[int(rng.integers(0, len(candidates)))]
        labels[pos] = original[pos]
        corrupted[pos] = 4  # MASK_ID
    return corrupted, labels


def _sentences(text: str) -> list[str]:
    return [s for s in _SENT_RE.split(text) if s.strip()]


def build_segment_pairs(store: DocumentStore, vocab: Vocab, seq_len: int,
                        nsp_enabled: bool, seed: int) -> list[tuple[EncodedPair, int | None]]:
    """Deterministic framed (pair, nsp_label) list: consecutive in-document
    segments labelled is-next, second segment swapped with one from another
    document (p=0.5) labelled not-next."""
    docs = [(d, [encode(s, vocab) for s in _sentences(d.text)]) for d in store]
    docs = [(d, [s for s in sents if s]) for d, sents in docs]
    docs = [(d, sents) for d, sents in docs if sents]
    if not docs:
        raise ValueError("build_segment_pairs: store contains no encodable text")
    if nsp_enabled and len(docs) < 2:
        raise SingleDocumentError(
            "NSP needs at least two documents (negatives come from a different "
            "document); disable NSP for single-document stores")
    rng = np.random.Generator(np.random.PCG64(derive_seed("pairs", seed)))
    out: list[tuple[EncodedPair, int | None]] = []

    if not nsp_enabled:
        budget = seq_len - 2
        for _, sents in docs:
            chunk: list[int] = []
            for s in sents:
                chunk.extend(s)
                if len(chunk) >= budget:
                    out.append((frame_pair(chunk[:budget], None, seq_len), None))
                    chunk = chunk[budget:]
            if chunk:
                out.append((frame_pair(chunk, None, seq_len), None))
        return out

    target_a = (seq_len - 3) // 2
    target_b = (seq_len - 3) - target_a

    def random_segment(exclude: int, want: int) -> list[int]:
        while True:
            di = int(rng.integers(0, len(docs)))
            if di != exclude:
                break
        sents = docs[di][1]
        start = int(rng.integers(0, len(sents)))
        seg: list[int] = []
        for s in sents[start:]:
            seg.extend(s)
            if len(seg) >= want:
                break
        return seg

    for di, (_, sents) in enumerate(docs):
        cursor = 0
        while cursor < len(sents):
            a: list[int] = []
            while cursor < len(sents) and len(a) < target_a:
                a.extend(sents[cursor])
                cursor += 1
            b: list[int] = []
            while cursor < len(sents) and len(b) < target_b:
                b.extend(sents[cursor])
                cursor += 1
            if not b:
                label = NOT_NEXT
                b = random_segment(di, target_b)
            elif rng.random() < 0.5:
                label = NOT_NEXT
                b = random_segment(di, target_b)
            else:
                label = IS_NEXT
            out.append((frame_pair(a, b, seq_len), label))
    return out


class ExampleStream:
    """Random-access infinite stream of masked TrainingExamples.

    One epoch is DUP_FACTOR copies of the framed-pair list, shuffled together
    (seeded per epoch); every copy of a pair is masked with its own seed.
    """

    def __init__(self, pairs: list[tuple[EncodedPair, int | None]], vocab: Vocab,
                 seed: int, mask_rate: float = MASK_RATE, dup_factor: int = DUP_FACTOR):
        if not pairs:
            raise ValueError("ExampleStream: no framed pairs")
        self.pairs = pairs
        self.vocab = vocab
        self.seed = seed
        self.mask_rate = mask_rate
        self.dup_factor = dup_factor
        self.epoch_size = len(pairs) * dup_factor
        self._perm_cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perm_cache.get(epoch)
        if perm is None:
            rng = np.random.Generator(np.random.PCG64(derive_seed("epoch", self.seed, epoch)))
            perm = rng.permutation(self.epoch_size)
            self._perm_cache = {epoch: perm}  # keep only the active epoch
        return perm

    def __getitem__(self, index: int) -> TrainingExample:
        epoch, r = divmod(index, self.epoch_size)
        k = int(self._perm(epoch)[r])
        dup, j = divmod(k, len(self.pairs))
        pair, nsp_label = self.pairs[j]
        ids, labels = _mask_bounded(pair.ids, self.mask_rate,
                                    derive_seed("ex", self.seed, epoch, dup, j), self.vocab)
        masked_pair = EncodedPair(ids=ids, segment_ids=list(pair.segment_ids),
                                  attention_mask=list(pair.attention_mask))
        return TrainingExample(pair=masked_pair, mlm_labels=labels, nsp_label=nsp_label)

    def __iter__(self):
        for i in range(self.epoch_size):
            yield self[i]


def build_examples(store: DocumentStore, vocab: Vocab, seq_len: int,
                   nsp_enabled: bool, seed: int) -> ExampleStream:
    pairs = build_segment_pairs(store, vocab, seq_len, nsp_enabled, seed)
    return ExampleStream(pairs, vocab, seed)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainPlan:
    strategy: str                       # "SC" | "FP"
    steps: int
    batch_size: int = 256
    seq_len: int = 512
    learning_rate: float = 1e-4
    seed: int = 0
    nsp_enabled: bool = True
    emit_steps: list[int] = field(default_factory=list)
    warmup: bool = True                 # linear warmup over the first 1% then decay to 0
    log_interval: int = 10
    config: EncoderConfig | None = None  # SC only
    parent_path: str | None = None       # FP only
    resume_from: str | None = None
    save_optimizer: bool = True
    adam: AdamHyper | None = None

    def __post_init__(self):
        if self.strategy not in ("SC", "FP"):
            raise ValueError(f"PretrainPlan: strategy must be SC or FP, got {self.strategy!r}")
        if self.strategy == "SC" and self.config is None:
            raise ValueError("PretrainPlan: SC requires an encoder config")
        if self.strategy == "FP" and not self.parent_path:
            raise ValueError("PretrainPlan: FP requires a parent checkpoint")
        if self.steps < 0 or self.batch_size <= 0 or self.seq_len < 3:
            raise ValueError("PretrainPlan: invalid steps/batch_size/seq_len")
        self.emit_steps = sorted(set(self.emit_steps))
        if self.emit_steps and (self.emit_steps[0] < 1 or self.emit_steps[-1] > self.steps):
            raise ValueError("PretrainPlan: emission steps must lie in [1, steps]")


def default_emission_schedule(strategy: str, steps: int) -> list[int]:
    """FP emits at {20,40,60,80,100}% of the budget; SC at the end only."""
    if steps == 0:
        return []
    if strategy == "FP":
        return sorted({max(1, round(steps * f)) for f in (0.2, 0.4, 0.6, 0.8, 1.0)})
    return [steps]


def learning_rate_at(plan: PretrainPlan, step: int) -> float:
    """Step is 0-based. Warmup over the first 1% of steps, then linear decay."""
    if not plan.warmup or plan.steps == 0:
        return plan.learning_rate
    w = max(1, round(0.01 * plan.steps))
    if step < w:
        return plan.learning_rate * (step + 1) / w
    if plan.steps == w:
        return plan.learning_rate
    return plan.learning_rate * (plan.steps - step) / (plan.steps - w)


@dataclass
class PretrainResult:
    checkpoint_paths: dict[int, Path]
    log_path: Path | None
    final_weights: dict


def _assemble_batch(examples: list[TrainingExample], vocab: Vocab):
    batch = EncodedBatch.from_pairs([e.pair for e in examples], vocab)
    positions, labels = [], []
    for bi, ex in enumerate(examples):
        for si in ex.masked_positions:
            positions.append((bi, si))
            labels.append(ex.mlm_labels[si])
    nsp_labels = [e.nsp_label for e in examples]
    return batch, positions, np.array(labels, dtype=np.int64), nsp_labels


def pretrain(plan: PretrainPlan, store: DocumentStore, vocab: Vocab, out_dir) -> PretrainResult:
    """Run exactly ``plan.steps`` optimizer steps, emitting checkpoints at the
    scheduled steps and appending a step,loss,mlm_loss,nsp_loss,lr CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if plan.strategy == "FP":
        parent = load_checkpoint(plan.parent_path)
        if parent.vocab_fingerprint != vocab.fingerprint:
            raise FingerprintMismatchError(
                f"FP vocab fingerprint {vocab.fingerprint} does not match parent "
                f"checkpoint's {parent.vocab_fingerprint}")
        config = parent.config
        weights = parent.clone_weights()
        base_steps = parent.lineage.steps
        lineage_proto = Lineage(strategy="FP", parent_id=parent.checkpoint_id, steps=base_steps)
    else:
        config = plan.config
        weights = init_weights(config, plan.seed)
        base_steps = 0
        lineage_proto = Lineage(strategy="SC", parent_id=None, steps=0)

    hyper = plan.adam or AdamHyper(learning_rate=plan.learning_rate)
    adam = AdamState.init(weights, hyper)
    start_step = 0

    if plan.resume_from:
        ck = load_checkpoint(plan.resume_from)
        if ck.vocab_fingerprint != vocab.fingerprint:
            raise FingerprintMismatchError("resume checkpoint was trained with a different vocabulary")
        if ck.config != config:
            raise ValueError("resume checkpoint config does not match the plan")
        weights = ck.clone_weights()
        lineage_proto = Lineage(strategy=ck.lineage.strategy, parent_id=ck.lineage.parent_id,
                                steps=base_steps)
        start_step = ck.creation_step
        if start_step > 0:
            if ck.opt_m is None or ck.opt_t is None:
                raise ValueError("resume checkpoint lacks optimizer state; cannot continue "
                                 "bit-identically")
            adam = AdamState(hyper=hyper, m={k: v.copy() for k, v in ck.opt_m.items()},
                             v={k: v.copy() for k, v in ck.opt_v.items()}, t=ck.opt_t)
        if start_step > plan.steps:
            raise ValueError(f"resume step {start_step} exceeds plan steps {plan.steps}")

    stream = build_examples(store, vocab, plan.seq_len, plan.nsp_enabled, plan.seed)
    emit_set = set(plan.emit_steps)
    paths: dict[int, Path] = {}

    def emit(local_step: int) -> Path:
        lineage = Lineage(strategy=lineage_proto.strategy, parent_id=lineage_proto.parent_id,
                          steps=base_steps + local_step)
        ck = Checkpoint(config=config, weights=weights, vocab_fingerprint=vocab.fingerprint,
                        lineage=lineage, creation_step=local_step,
                        opt_m=adam.m if plan.save_optimizer else None,
                        opt_v=adam.v if plan.save_optimizer else None,
                        opt_t=adam.t if plan.save_optimizer else None)
        path = out_dir / f"checkpoint-{local_step:06d}.slab"
        save_checkpoint(ck, path)
        paths[local_step] = path
        return path

    if start_step == 0:
        emit(0)

    log_path = out_dir / "loss.csv"
    log_file = open(log_path, "w", newline="", encoding="utf-8")
    writer = csv.writer(log_file)
    writer.writerow(["step", "loss", "mlm_loss", "nsp_loss", "lr"])

    # lightweight handle reused by forward/mlm/nsp; never saved as-is
    live = Checkpoint(config=config, weights=weights, vocab_fingerprint=vocab.fingerprint,
                      lineage=lineage_proto)
    try:
        for step in range(start_step, plan.steps):
            examples = [stream[step * plan.batch_size + i] for i in range(plan.batch_size)]
            batch, positions, labels, nsp_labels = _assemble_batch(examples, vocab)
            with T.Tape() as tape:
                out = forward(live, batch, dropout_seed=derive_seed("drop", plan.seed, step))
                mlm = T.cross_entropy(mlm_logits(out.hidden, positions, live), labels)
                if plan.nsp_enabled:
                    nsp = T.cross_entropy(nsp_logits(out.cls, live),
                                          np.array(nsp_labels, dtype=np.int64))
                    loss = mlm + nsp
                else:
                    nsp = None
                    loss = mlm
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise PretrainDivergedError(
                    f"non-finite loss at step {step + 1}; last good checkpoint: "
                    f"{max(paths) if paths else 'none'}")
            T.backward(tape, loss)
            lr = learning_rate_at(plan, step)
            adam_step(weights, {k: w.grad for k, w in weights.items() if w.grad is not None},
                      adam, learning_rate=lr)
            for w in weights.values():
                w.zero_grad()
            done = step + 1
            if done % plan.log_interval == 0 or done == plan.steps:
                writer.writerow([done, repr(loss_val), repr(mlm.item()),
                                 repr(nsp.item()) if nsp is not None else "0.0", repr(lr)])
            if done in emit_set:
                emit(done)
    finally:
        log_file.close()

    return PretrainResult(checkpoint_paths=paths, log_path=log_path, final_weights=weights)
