"""Fine-tuning task models: the three downstream architectures wired to
encoder checkpoints, behind the small protocol the tuner drives
(train_epoch / validation_loss / metric / snapshot / restore).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .adam import AdamHyper, AdamState, adam_step
from .bpe import UNK_ID, Vocab, encode, frame_pair
from .checkpoint import Checkpoint, load_checkpoint
from .encoder import EncodedBatch, forward
from .heads import (HierPooler, MultiLabelHead, TagLattice, attention_pool, crf_nll,
                    crf_viterbi, multilabel_loss, multilabel_scores)
from .metrics import accuracy, entity_f1, micro_f1
from .synth import TaskRecord
from .util import derive_seed

BINARY_LABEL = "violation"


class TrialModel(Protocol):
    def train_epoch(self) -> float: ...
    def validation_loss(self) -> float: ...
    def metric(self) -> float: ...
    def snapshot(self): ...
    def restore(self, snap) -> None: ...


class FineTuneTask(Protocol):
    task_id: str
    def build(self, learning_rate: float, batch_size: int, dropout: float,
              seed: int) -> TrialModel: ...


@dataclass
class TaskData:
    task_type: str
    train: list[TaskRecord]
    dev: list[TaskRecord]
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.train or not self.dev:
            raise ValueError("TaskData: train and dev must be non-empty")
        if not self.label_names:
            if self.task_type == "ner":
                tags = {t for r in self.train + self.dev for t in r.tags}
                self.label_names = ["O"] + sorted(tags - {"O"})
            elif self.task_type == "hierarchical-binary":
                self.label_names = [BINARY_LABEL]
            else:
                self.label_names = sorted({l for r in self.train + self.dev for l in r.labels})
        if not self.label_names:
            raise ValueError("TaskData: no labels found")


@dataclass
class EncoderFineTuneTask:
    """Fine-tune a pre-trained checkpoint on one task dataset."""

    task_id: str
    data: TaskData
    checkpoint_path: str
    vocab: Vocab
    max_len: int = 48
    max_facts: int = 8
    freeze_encoder: bool = False
    _base: Checkpoint | None = field(default=None, repr=False)

    def base_checkpoint(self) -> Checkpoint:
        if self._base is None:
            self._base = load_checkpoint(self.checkpoint_path)
        return self._base

    def build(self, learning_rate: float, batch_size: int, dropout: float, seed: int):
        base = self.base_checkpoint()
        kinds = {
            "multilabel": MultiLabelModel,
            "hierarchical-binary": HierModel,
            "hierarchical-multilabel": HierModel,
            "ner": NerModel,
        }
        cls = kinds[self.data.task_type]
        return cls(self, base, learning_rate, batch_size, dropout, seed)


class _EncoderModel:
    """Shared plumbing: cloned weights, the optimizer, epoch bookkeeping."""

    def __init__(self, task: EncoderFineTuneTask, base: Checkpoint,
                 learning_rate: float, batch_size: int, dropout: float, seed: int):
        self.task = task
        self.data = task.data
        self.vocab = task.vocab
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        config = replace(base.config, dropout=dropout)
        weights = base.clone_weights()
        if task.freeze_encoder:
            for w in weights.values():
                w.requires_grad = False
        self.ckpt = Checkpoint(config=config, weights=weights,
                               vocab_fingerprint=base.vocab_fingerprint,
                               lineage=base.lineage)
        self.params: dict[str, T.Tensor] = {} if task.freeze_encoder else dict(weights)
        self._init_head(derive_seed("head", seed))
        self.adam = AdamState.init(self.params, AdamHyper(learning_rate=learning_rate))

    def _init_head(self, seed: int) -> None:
        raise NotImplementedError

    def _loss(self, records: Sequence[TaskRecord], dropout_seed: int | None) -> T.Tensor:
        raise NotImplementedError

    def _predict(self, records: Sequence[TaskRecord]):
        raise NotImplementedError

    def train_epoch(self) -> float:
        rng = np.random.Generator(np.random.PCG64(derive_seed("epoch", self.seed, self.epoch)))
        order = rng.permutation(len(self.data.train))
        total, count = 0.0, 0
        for bi in range(0, len(order), self.batch_size):
            records = [self.data.train[i] for i in order[bi:bi + self.batch_size]]
            with T.Tape() as tape:
                loss = self._loss(records, derive_seed("drop", self.seed, self.epoch, bi))
            val = loss.item()
            total += val
            count += 1
            if not math.isfinite(val):
                self.epoch += 1
                return val
            T.backward(tape, loss)
            adam_step(self.params, {k: p.grad for k, p in self.params.items()
                                    if p.grad is not None}, self.adam)
            for p in self.params.values():
                p.zero_grad()
        self.epoch += 1
        return total / max(count, 1)

    def validation_loss(self) -> float:
        total, count = 0.0, 0
        for bi in range(0, len(self.data.dev), self.batch_size):
            records = self.data.dev[bi:bi + self.batch_size]
            total += self._loss(records, None).item() * len(records)
            count += len(records)
        return total / count

    def snapshot(self):
        head = {k: p.data.copy() for k, p in self._head_params().items()}
        enc = {} if self.task.freeze_encoder else {k: w.data.copy()
                                                   for k, w in self.ckpt.weights.items()}
        return head, enc

    def restore(self, snap) -> None:
        head, enc = snap
        for k, p in self._head_params().items():
            p.data = head[k].copy()
        for k, arr in enc.items():
            self.ckpt.weights[k].data = arr.copy()

    def _head_params(self) -> dict[str, T.Tensor]:
        raise NotImplementedError


class MultiLabelModel(_EncoderModel):
    def _init_head(self, seed: int) -> None:
        self.head = MultiLabelHead.init(self.ckpt.config.hidden, len(self.data.label_names), seed)
        self.params.update(self.head.params())

    def _head_params(self):
        return self.head.params()

    def _encode(self, records) -> EncodedBatch:
        max_len = self.task.max_len
        pairs = [frame_pair(encode(r.text, self.vocab)[:max_len - 2], None, max_len)
                 for r in records]
        return EncodedBatch.from_pairs(pairs, self.vocab)

    def _targets(self, records) -> np.ndarray:
        names = self.data.label_names
        t = np.zeros((len(records), len(names)), dtype=np.float32)
        for i, r in enumerate(records):
            for l in r.labels:
                if l in names:
                    t[i, names.index(l)] = 1.0
        return t

    def _loss(self, records, dropout_seed):
        out = forward(self.ckpt, self._encode(records), dropout_seed=dropout_seed)
        return multilabel_loss(out.cls, self.head, self._targets(records))

    def _predict(self, records) -> list[list[str]]:
        out = forward(self.ckpt, self._encode(records))
        probs = multilabel_scores(out.cls, self.head).data
        names = self.data.label_names
        return [[names[j] for j in range(len(names)) if probs[i, j] > 0.5]
                for i in range(len(records))]

    def metric(self) -> float:
        return evaluate(self, self.data.dev).value


class HierModel(_EncoderModel):
    """Shared encoder over facts, attention pooling, then the sigmoid head
    (L=1 plus a 0.5 threshold for the binary variant)."""

    def _init_head(self, seed: int) -> None:
        hidden = self.ckpt.config.hidden
        self.pooler = HierPooler.init(hidden, seed)
        self.head = MultiLabelHead.init(hidden, len(self.data.label_names),
                                        derive_seed("hier-head", seed))
        self.params.update(self.pooler.params())
        self.params.update(self.head.params())

    def _head_params(self):
        return {**self.pooler.params(), **self.head.params()}

    def _doc_vectors(self, records, dropout_seed):
        max_len, max_facts = self.task.max_len, self.task.max_facts
        pairs, counts = [], []
        for r in records:
            facts = r.facts[:max_facts]
            counts.append(len(facts))
            pairs.extend(frame_pair(encode(f, self.vocab)[:max_len - 2], None, max_len)
                         for f in facts)
        batch = EncodedBatch.from_pairs(pairs, self.vocab)
        out = forward(self.ckpt, batch, dropout_seed=dropout_seed)
        docs = []
        lo = 0
        for n in counts:
            doc, _ = attention_pool(out.cls[lo:lo + n, :], self.pooler)
            docs.append(doc)
            lo += n
        return docs

    def _targets(self, record) -> np.ndarray:
        names = self.data.label_names
        t = np.zeros(len(names), dtype=np.float32)
        for l in record.labels:
            if l in names:
                t[names.index(l)] = 1.0
        return t

    def _loss(self, records, dropout_seed):
        docs = self._doc_vectors(records, dropout_seed)
        total = None
        for doc, r in zip(docs, records):
            piece = multilabel_loss(doc, self.head, self._targets(r))
            total = piece if total is None else total + piece
        return total * (1.0 / len(records))

    def _predict(self, records) -> list[list[str]]:
        docs = self._doc_vectors(records, None)
        names = self.data.label_names
        preds = []
        for doc in docs:
            probs = multilabel_scores(doc, self.head).data
            preds.append([names[j] for j in range(len(names)) if probs[j] > 0.5])
        return preds

    def metric(self) -> float:
        return evaluate(self, self.data.dev).value


def evaluate(model: "_EncoderModel", records: Sequence[TaskRecord]):
    """Metric report of ``model`` on ``records`` (same measure the tuner uses)."""
    preds = []
    for bi in range(0, len(records), model.batch_size):
        preds.extend(model._predict(records[bi:bi + model.batch_size]))
    task_id = model.task.task_id
    task_type = model.data.task_type
    if task_type == "ner":
        return entity_f1(preds, [r.tags for r in records], task_id=task_id)
    gold = [r.labels for r in records]
    if task_type == "hierarchical-binary":
        return accuracy([BINARY_LABEL in p for p in preds],
                        [BINARY_LABEL in g for g in gold], task_id=task_id)
    return micro_f1(preds, gold, task_id=task_id)


def save_task_model(model: "_EncoderModel", out_dir) -> None:
    """Persist a fine-tuned task model: encoder checkpoint + head tensors + meta."""
    import json
    from pathlib import Path

    from .checkpoint import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.ckpt, out_dir / "encoder.slab")
    heads = {k: p.data for k, p in model._head_params().items()}
    np.savez(out_dir / "head.npz", **heads)
    meta = {"task_type": model.data.task_type, "task_id": model.task.task_id,
            "label_names": model.data.label_names, "max_len": model.task.max_len,
            "max_facts": model.task.max_facts}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1),
                                       encoding="utf-8")


def load_task_model(model_dir, records: Sequence[TaskRecord], vocab: Vocab,
                    batch_size: int = 16) -> "_EncoderModel":
    """Rebuild a saved task model for prediction over ``records``."""
    import json
    from pathlib import Path

    model_dir = Path(model_dir)
    meta = json.loads((model_dir / "meta.json").read_text(encoding="utf-8"))
    data = TaskData(task_type=meta["task_type"], train=list(records), dev=list(records),
                    label_names=meta["label_names"])
    task = EncoderFineTuneTask(task_id=meta["task_id"], data=data,
                               checkpoint_path=str(model_dir / "encoder.slab"), vocab=vocab,
                               max_len=meta["max_len"], max_facts=meta["max_facts"])
    model = task.build(learning_rate=1e-3, batch_size=batch_size, dropout=0.0, seed=0)
    saved = np.load(model_dir / "head.npz")
    for k, p in model._head_params().items():
        p.data = saved[k].astype(np.float32)
    return model


class NerModel(_EncoderModel):
    """Per-token tagger: emissions from first-subword hidden states feed a
    linear-chain CRF; words whose subwords overflow the window predict O."""

    def _init_head(self, seed: int) -> None:
        hidden = self.ckpt.config.hidden
        k = len(self.data.label_names)
        rng = np.random.Generator(np.random.PCG64(derive_seed("ner-head", seed)))
        self.proj_w = T.Tensor(np.clip(rng.normal(0, 0.02, (hidden, k)), -0.04, 0.04)
                               .astype(np.float32), requires_grad=True)
        self.proj_b = T.Tensor(np.zeros(k, dtype=np.float32), requires_grad=True)
        self.transitions = T.Tensor(np.zeros((k, k), dtype=np.float32), requires_grad=True)
        self.params.update(self._head_params())

    def _head_params(self):
        return {"ner.proj.w": self.proj_w, "ner.proj.b": self.proj_b,
                "ner.transitions": self.transitions}

    def _frame(self, record):
        max_len = self.task.max_len
        ids, first = [2], []  # CLS
        for word in record.tokens:
            sub = encode(word, self.vocab) or [UNK_ID]
            if len(ids) + len(sub) > max_len - 1:
                break
            first.append(len(ids))
            ids.extend(sub)
        pair = frame_pair(ids[1:], None, max_len)
        return pair, first

    def _emissions(self, hidden, row: int, first: list[int]):
        bi = np.full(len(first), row, dtype=np.int64)
        si = np.array(first, dtype=np.int64)
        picked = T.gather_positions(hidden, bi, si)
        return picked @ self.proj_w + self.proj_b

    def _loss(self, records, dropout_seed):
        framed = [self._frame(r) for r in records]
        batch = EncodedBatch.from_pairs([p for p, _ in framed], self.vocab)
        out = forward(self.ckpt, batch, dropout_seed=dropout_seed)
        names = self.data.label_names
        total = None
        for row, (r, (_, first)) in enumerate(zip(records, framed)):
            if not first:
                continue
            lattice = TagLattice(emissions=self._emissions(out.hidden, row, first),
                                 transitions=self.transitions)
            gold = [names.index(t) for t in r.tags[:len(first)]]
            piece = crf_nll(lattice, gold)
            total = piece if total is None else total + piece
        if total is None:
            raise ValueError("NER batch contained no taggable words")
        return total * (1.0 / len(records))

    def _predict(self, records) -> list[list[str]]:
        framed = [self._frame(r) for r in records]
        batch = EncodedBatch.from_pairs([p for p, _ in framed], self.vocab)
        out = forward(self.ckpt, batch)
        names = self.data.label_names
        preds = []
        for row, (r, (_, first)) in enumerate(zip(records, framed)):
            tags = ["O"] * len(r.tokens)
            if first:
                lattice = TagLattice(emissions=self._emissions(out.hidden, row, first),
                                     transitions=self.transitions)
                path, _ = crf_viterbi(lattice)
                for wi, tag_id in enumerate(path):
                    tags[wi] = names[tag_id]
            preds.append(tags)
        return preds

    def metric(self) -> float:
        return evaluate(self, self.data.dev).value
