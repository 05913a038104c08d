"""Synthetic sublanguages and solvable-by-construction task datasets.

Each domain gets its own invented word lexicon (with a configurable shared
fraction between domains) and simple sentence templates. Task labels are
deterministic functions of surface features (trigger words, entity
lexicons), so every generated task is learnable to ceiling by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, ManifestEntry
from .util import derive_seed

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"

TASK_TYPES = ("multilabel", "hierarchical-binary", "hierarchical-multilabel", "ner")


@dataclass
class SynthSpec:
    task: str = "multilabel"
    domains: int = 2
    overlap: float = 0.0              # fraction of each domain lexicon shared across domains
    words_per_domain: int = 120
    docs_per_domain: int = 200
    sentences_per_doc: tuple[int, int] = (3, 8)
    words_per_sentence: tuple[int, int] = (5, 12)
    num_labels: int = 4               # multilabel / hierarchical-multilabel
    entity_types: int = 3             # ner
    facts_per_doc: tuple[int, int] = (2, 5)
    task_examples: int = 300
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_TYPES:
            raise ValueError(f"SynthSpec: unknown task {self.task!r} (choose from {TASK_TYPES})")
        if self.domains < 2:
            raise ValueError("SynthSpec: need at least two domains")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("SynthSpec: overlap must be in [0, 1]")
        if self.words_per_domain < 10 or self.task_examples < 10:
            raise ValueError("SynthSpec: degenerate grammar (too few words or examples)")


@dataclass
class TaskRecord:
    rec_id: str
    labels: list[str] = field(default_factory=list)
    text: str | None = None            # multilabel
    facts: list[str] | None = None     # hierarchical-*
    tokens: list[str] | None = None    # ner
    tags: list[str] | None = None      # ner

    def to_json(self) -> str:
        if self.tokens is not None:
            rec = {"id": self.rec_id, "tokens": self.tokens, "tags": self.tags}
        elif self.facts is not None:
            rec = {"id": self.rec_id, "facts": self.facts, "labels": self.labels}
        else:
            rec = {"id": self.rec_id, "text": self.text, "labels": self.labels}
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TaskRecord":
        rec = json.loads(line)
        return cls(rec_id=rec["id"], labels=rec.get("labels", []), text=rec.get("text"),
                   facts=rec.get("facts"), tokens=rec.get("tokens"), tags=rec.get("tags"))


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_records(path) -> list[TaskRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(TaskRecord.from_json(line))
    return out


def _make_word(rng) -> str:
    n = int(rng.integers(2, 4))
    return "".join(_CONSONANTS[int(rng.integers(0, len(_CONSONANTS)))]
                   + _VOWELS[int(rng.integers(0, len(_VOWELS)))] for _ in range(n))


def _word_pool(rng, count: int, taken: set[str]) -> list[str]:
    pool = []
    while len(pool) < count:
        w = _make_word(rng)
        if w not in taken:
            taken.add(w)
            pool.append(w)
    return pool


@dataclass
class Grammar:
    """One domain's lexicon plus mildly Zipfian word weights."""

    name: str
    words: list[str]
    weights: np.ndarray

    def sentence(self, rng, lo: int, hi: int) -> str:
        n = int(rng.integers(lo, hi + 1))
        idx = rng.choice(len(self.words), size=n, p=self.weights)
        return " ".join(self.words[i] for i in idx) + "."


@dataclass
class TaskLexicons:
    """Reserved words with fixed task semantics, disjoint from all filler
    lexicons; they also appear in the task domain's corpus so a from-scratch
    vocabulary learns them as tokens."""

    triggers: list[list[str]]        # per label, multilabel variants
    binary_triggers: list[str]
    entities: list[list[str]]        # per entity type

    def all_words(self) -> list[str]:
        out = [w for group in self.triggers for w in group]
        out += self.binary_triggers
        out += [w for group in self.entities for w in group]
        return out


def reserve_task_words(spec: SynthSpec, taken: set[str]) -> TaskLexicons:
    rng = np.random.Generator(np.random.PCG64(derive_seed("reserved", spec.seed)))
    return TaskLexicons(
        triggers=_reserved(rng, taken, spec.num_labels, 2),
        binary_triggers=_word_pool(rng, 3, taken),
        entities=_reserved(rng, taken, spec.entity_types, 6),
    )


def build_grammars(spec: SynthSpec) -> tuple[list[Grammar], TaskLexicons]:
    rng = np.random.Generator(np.random.PCG64(derive_seed("grammar", spec.seed)))
    taken: set[str] = set()
    n_shared = round(spec.overlap * spec.words_per_domain)
    shared = _word_pool(rng, n_shared, taken)
    grammars = []
    for d in range(spec.domains):
        own = _word_pool(rng, spec.words_per_domain - n_shared, taken)
        words = shared + own
        ranks = np.arange(1, len(words) + 1, dtype=np.float64)
        weights = 1.0 / (ranks + 2.0)
        weights /= weights.sum()
        grammars.append(Grammar(name=f"dom{chr(ord('a') + d)}", words=words, weights=weights))
    lexicons = reserve_task_words(spec, taken)
    return grammars, lexicons


def domain_documents(spec: SynthSpec, grammar: Grammar,
                     inject: list[str] | None = None) -> list[str]:
    """Documents of template sentences; ``inject`` words (the task domain's
    reserved vocabulary) are sprinkled in so subword training sees them."""
    rng = np.random.Generator(np.random.PCG64(derive_seed("docs", spec.seed, grammar.name)))
    lo_s, hi_s = spec.sentences_per_doc
    lo_w, hi_w = spec.words_per_sentence
    docs = []
    for _ in range(spec.docs_per_domain):
        n = int(rng.integers(lo_s, hi_s + 1))
        sentences = []
        for _ in range(n):
            s = grammar.sentence(rng, lo_w, hi_w)
            if inject and rng.random() < 0.5:
                words = s[:-1].split(" ")
                w = inject[int(rng.integers(0, len(inject)))]
                words.insert(int(rng.integers(0, len(words) + 1)), w)
                s = " ".join(words) + "."
            sentences.append(s)
        docs.append(" ".join(sentences))
    return docs


# ---------------------------------------------------------------------------
# task generators; labels are functions of reserved trigger/entity words
# ---------------------------------------------------------------------------

def _reserved(rng, taken: set[str], groups: int, per_group: int) -> list[list[str]]:
    return [_word_pool(rng, per_group, taken) for _ in range(groups)]


def gen_multilabel(spec: SynthSpec, grammar: Grammar, lexicons: TaskLexicons,
                   hierarchical: bool = False) -> list[TaskRecord]:
    rng = np.random.Generator(np.random.PCG64(derive_seed("task", spec.seed, spec.task)))
    triggers = lexicons.triggers
    names = [f"L{i}" for i in range(spec.num_labels)]
    lo_w, hi_w = spec.words_per_sentence
    records = []
    for i in range(spec.task_examples):
        active = [l for l in range(spec.num_labels) if rng.random() < 0.45]
        def sentence_with(triggers_here):
            words = grammar.sentence(rng, lo_w, hi_w)[:-1].split(" ")
            for t in triggers_here:
                words.insert(int(rng.integers(0, len(words) + 1)), t)
            return " ".join(words) + "."
        chosen = [triggers[l][int(rng.integers(0, 2))] for l in active]
        if hierarchical:
            n_facts = int(rng.integers(spec.facts_per_doc[0], spec.facts_per_doc[1] + 1))
            facts = [grammar.sentence(rng, lo_w, hi_w) for _ in range(n_facts)]
            for t in chosen:
                fi = int(rng.integers(0, n_facts))
                words = facts[fi][:-1].split(" ")
                words.insert(int(rng.integers(0, len(words) + 1)), t)
                facts[fi] = " ".join(words) + "."
            records.append(TaskRecord(rec_id=f"{spec.task}-{i}", facts=facts,
                                      labels=[names[l] for l in active]))
        else:
            records.append(TaskRecord(rec_id=f"{spec.task}-{i}", text=sentence_with(chosen),
                                      labels=[names[l] for l in active]))
    return records


def gen_hier_binary(spec: SynthSpec, grammar: Grammar,
                    lexicons: TaskLexicons) -> list[TaskRecord]:
    rng = np.random.Generator(np.random.PCG64(derive_seed("task", spec.seed, spec.task)))
    trigger_words = lexicons.binary_triggers
    lo_w, hi_w = spec.words_per_sentence
    records = []
    for i in range(spec.task_examples):
        n_facts = int(rng.integers(spec.facts_per_doc[0], spec.facts_per_doc[1] + 1))
        facts = [grammar.sentence(rng, lo_w, hi_w) for _ in range(n_facts)]
        positive = rng.random() < 0.5
        if positive:
            t = trigger_words[int(rng.integers(0, len(trigger_words)))]
            fi = int(rng.integers(0, n_facts))
            words = facts[fi][:-1].split(" ")
            words.insert(int(rng.integers(0, len(words) + 1)), t)
            facts[fi] = " ".join(words) + "."
        records.append(TaskRecord(rec_id=f"{spec.task}-{i}", facts=facts,
                                  labels=["violation"] if positive else []))
    return records


def gen_ner(spec: SynthSpec, grammar: Grammar, lexicons: TaskLexicons) -> list[TaskRecord]:
    rng = np.random.Generator(np.random.PCG64(derive_seed("task", spec.seed, spec.task)))
    entity_words = lexicons.entities
    types = [f"t{i}" for i in range(spec.entity_types)]
    lo_w, hi_w = spec.words_per_sentence
    records = []
    for i in range(spec.task_examples):
        words = grammar.sentence(rng, lo_w, hi_w)[:-1].split(" ")
        tags = ["O"] * len(words)
        for _ in range(int(rng.integers(1, 4))):
            ty = int(rng.integers(0, spec.entity_types))
            span = [entity_words[ty][int(rng.integers(0, len(entity_words[ty])))]
                    for _ in range(int(rng.integers(1, 3)))]
            pos = int(rng.integers(0, len(words) + 1))
            words[pos:pos] = span
            tags[pos:pos] = [f"B-{types[ty]}"] + [f"I-{types[ty]}"] * (len(span) - 1)
        records.append(TaskRecord(rec_id=f"{spec.task}-{i}", tokens=words, tags=tags))
    return records


def split_records(records: list[TaskRecord], split: tuple[float, float, float],
                  seed: int) -> dict[str, list[TaskRecord]]:
    rng = np.random.Generator(np.random.PCG64(derive_seed("split", seed)))
    order = rng.permutation(len(records))
    n_train = int(round(split[0] * len(records)))
    n_dev = int(round(split[1] * len(records)))
    shuffled = [records[i] for i in order]
    return {"train": shuffled[:n_train],
            "dev": shuffled[n_train:n_train + n_dev],
            "test": shuffled[n_train + n_dev:]}


@dataclass
class SynthOutput:
    corpora: dict[str, list[str]]           # domain name -> documents
    manifest: CorpusManifest
    task_splits: dict[str, list[TaskRecord]]
    grammars: list[Grammar]
    lexicons: TaskLexicons


def gen_synth(spec: SynthSpec, out_dir=None) -> SynthOutput:
    """Generate domain corpora plus one task dataset with train/dev/test splits.
    Deterministic given the spec's seed; optionally writes everything under
    ``out_dir`` (corpus-<domain>.txt, manifest.jsonl, task.{train,dev,test}).
    The first domain hosts the task; its reserved trigger/entity words are
    injected into that domain's corpus only."""
    grammars, lexicons = build_grammars(spec)
    task_grammar = grammars[0]
    corpora = {g.name: domain_documents(spec, g,
                                        inject=lexicons.all_words() if g is task_grammar else None)
               for g in grammars}
    if spec.task == "multilabel":
        records = gen_multilabel(spec, task_grammar, lexicons)
    elif spec.task == "hierarchical-multilabel":
        records = gen_multilabel(spec, task_grammar, lexicons, hierarchical=True)
    elif spec.task == "hierarchical-binary":
        records = gen_hier_binary(spec, task_grammar, lexicons)
    else:
        records = gen_ner(spec, task_grammar, lexicons)
    splits = split_records(records, spec.split, spec.seed)

    entries = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, docs in corpora.items():
            path = out_dir / f"corpus-{name}.txt"
            path.write_text("\n".join(docs) + "\n", encoding="utf-8")
            entries.append(ManifestEntry(name=name, source=str(path), domain=name))
        manifest = CorpusManifest(entries=entries)
        manifest.save(out_dir / "manifest.jsonl")
        for split_name, recs in splits.items():
            save_records(recs, out_dir / f"task.{split_name}")
    else:
        manifest = CorpusManifest(entries=[])
    return SynthOutput(corpora=corpora, manifest=manifest, task_splits=splits,
                       grammars=grammars, lexicons=lexicons)
