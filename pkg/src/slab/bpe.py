"""Byte-level BPE vocabulary: training, persistence, encoding, pair framing.

The trainer is fully deterministic: pair counts aggregated over word types,
ties broken toward the lexicographically smallest pair. Text is lowercased
and whitespace-normalized before encoding; a leading space is kept as part
of each non-initial word (rendered via the printable byte alphabet) so that
decode(encode(x)) round-trips exactly after normalization.
"""
from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)

_WS_RE = re.compile(r"\s+")


def _bytes_to_unicode() -> dict[int, str]:
    """Bijective byte -> printable-char map (keeps vocab files one token per line)."""
    bs = (list(range(ord("!"), ord("~") + 1))
          + list(range(ord("\xa1"), ord("\xac") + 1))
          + list(range(ord("\xae"), ord("\xff") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


BYTE_TO_CHAR = _bytes_to_unicode()
CHAR_TO_BYTE = {c: b for b, c in BYTE_TO_CHAR.items()}


def normalize(text: str) -> str:
    return _WS_RE.sub(" ", text.lower()).strip()


def _pieces(text: str) -> list[str]:
    """Split normalized text into words, keeping the separating space on each
    word after the first."""
    words = text.split(" ") if text else []
    out = []
    for i, w in enumerate(words):
        if not w:
            continue
        out.append(w if not out else " " + w)
    return out


def _to_chars(piece: str) -> list[str]:
    return [BYTE_TO_CHAR[b] for b in piece.encode("utf-8")]


@dataclass
class Vocab:
    """Trained subword inventory: id<->token bijection plus ordered merge rules."""

    tokens: list[str]
    merges: list[tuple[str, str]]
    target_size: int
    token_to_id: dict[str, int] = field(default_factory=dict, repr=False)
    ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False)
    fingerprint: str = ""
    _cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if not self.ranks:
            self.ranks = {m: i for i, m in enumerate(self.merges)}
        if not self.fingerprint:
            self.fingerprint = _fingerprint(self.tokens, self.merges)
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("Vocab: token list contains duplicates")
        for i, name in enumerate(SPECIAL_TOKENS):
            if self.tokens[i] != name:
                raise ValueError(f"Vocab: id {i} must be {name}, got {self.tokens[i]!r}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def alphabet(self) -> set[str]:
        return {t for t in self.tokens[NUM_SPECIALS:] if len(t) == 1}

    def is_special(self, token_id: int) -> bool:
        return token_id < NUM_SPECIALS


def _fingerprint(tokens: Sequence[str], merges: Sequence[tuple[str, str]]) -> str:
    h = hashlib.sha256()
    for t in tokens:
        h.update(t.encode("utf-8"))
        h.update(b"\x00")
    h.update(b"\x01")
    for left, right in merges:
        h.update(left.encode("utf-8"))
        h.update(b"\x00")
        h.update(right.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


def train_vocab(corpus: Iterable[str], target_size: int, seed: int = 0) -> Vocab:
    """Learn a byte-level BPE vocabulary of exactly ``target_size`` entries.

    ``corpus`` is a stream of documents; the result depends only on corpus
    order and ``target_size`` (training is deterministic; the seed is only
    recorded for provenance in run metadata).
    """
    word_freqs: dict[str, int] = {}
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        for piece in _pieces(normalize(doc)):
            word_freqs[piece] = word_freqs.get(piece, 0) + 1
    if n_docs == 0 or not word_freqs:
        raise ValueError("train_vocab: empty corpus")

    alphabet = sorted({c for piece in word_freqs for c in _to_chars(piece)},
                      key=lambda c: CHAR_TO_BYTE[c])
    floor = NUM_SPECIALS + len(alphabet)
    if target_size <= floor:
        raise ValueError(f"train_vocab: target_size must exceed {floor} "
                         f"({NUM_SPECIALS} specials + {len(alphabet)} byte symbols)")

    words = [list(_to_chars(piece)) for piece in word_freqs]
    freqs = list(word_freqs.values())

    pair_counts: dict[tuple[str, str], int] = {}
    pair_words: dict[tuple[str, str], set[int]] = {}
    for wi, syms in enumerate(words):
        f = freqs[wi]
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + f
            pair_words.setdefault(pair, set()).add(wi)

    tokens = list(SPECIAL_TOKENS) + alphabet
    seen = set(tokens)
    merges: list[tuple[str, str]] = []

    while len(tokens) < target_size:
        best, best_count = None, 0
        for pair, count in pair_counts.items():
            if count > best_count or (count == best_count and best is not None and pair < best):
                best, best_count = pair, count
        if best is None or best_count == 0:
            raise ValueError(f"train_vocab: corpus exhausted after {len(tokens)} tokens, "
                             f"cannot reach target_size {target_size}")
        merged = best[0] + best[1]
        merges.append(best)
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)
        # rewrite every word type containing the pair, updating counts incrementally
        for wi in sorted(pair_words.get(best, ())):
            syms = words[wi]
            f = freqs[wi]
            i = 0
            while i < len(syms) - 1:
                if syms[i] == best[0] and syms[i + 1] == best[1]:
                    if i > 0:
                        _bump(pair_counts, pair_words, (syms[i - 1], syms[i]), -f, wi)
                        _bump(pair_counts, pair_words, (syms[i - 1], merged), f, wi)
                    if i + 2 < len(syms):
                        _bump(pair_counts, pair_words, (syms[i + 1], syms[i + 2]), -f, wi)
                        _bump(pair_counts, pair_words, (merged, syms[i + 2]), f, wi)
                    syms[i:i + 2] = [merged]
                else:
                    i += 1
        pair_counts.pop(best, None)
        pair_words.pop(best, None)

    return Vocab(tokens=tokens, merges=merges, target_size=target_size)


def _bump(counts, pair_words, pair, delta, wi):
    c = counts.get(pair, 0) + delta
    if c <= 0:
        counts.pop(pair, None)
    else:
        counts[pair] = c
    if delta > 0:
        pair_words.setdefault(pair, set()).add(wi)


def _apply_merges(symbols: list, ranks: dict) -> list:
    """Repeatedly apply the highest-priority applicable merge rule. ``None``
    entries (unknown bytes) block merges across them."""
    while len(symbols) > 1:
        best_rank = None
        for i in range(len(symbols) - 1):
            a, b = symbols[i], symbols[i + 1]
            if a is None or b is None:
                continue
            r = ranks.get((a, b))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                pair = (a, b)
        if best_rank is None:
            break
        merged = pair[0] + pair[1]
        i = 0
        while i < len(symbols) - 1:
            if symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
                symbols[i:i + 2] = [merged]
            else:
                i += 1
    return symbols


def encode(text: str, vocab: Vocab) -> list[int]:
    """Text to unframed token ids; unknown bytes map to [UNK]."""
    out: list[int] = []
    alphabet = None
    for piece in _pieces(normalize(text)):
        cached = vocab._cache.get(piece)
        if cached is None:
            if alphabet is None:
                alphabet = vocab.alphabet
            symbols = [c if c in alphabet else None for c in _to_chars(piece)]
            symbols = _apply_merges(symbols, vocab.ranks)
            cached = tuple(UNK_ID if s is None else vocab.token_to_id[s] for s in symbols)
            vocab._cache[piece] = cached
        out.extend(cached)
    return out


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Token ids back to text; special ids render as their literal names."""
    parts: list[str] = []
    byte_buf = bytearray()

    def flush():
        if byte_buf:
            parts.append(byte_buf.decode("utf-8", errors="replace"))
            byte_buf.clear()

    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise ValueError(f"decode: id {i} out of range for vocab of size {vocab.size}")
        if i < NUM_SPECIALS:
            flush()
            parts.append(vocab.tokens[i])
        else:
            for c in vocab.tokens[i]:
                byte_buf.append(CHAR_TO_BYTE[c])
    flush()
    return "".join(parts).strip()


# ---------------------------------------------------------------------------
# persistence: plain-text vocab file plus sibling merges file
# ---------------------------------------------------------------------------

def merges_path(path) -> Path:
    return Path(path).with_suffix(".merges")


def save_vocab(vocab: Vocab, path) -> None:
    path = Path(path)
    lines = [f"vocab-v1 {vocab.size} {vocab.fingerprint}"]
    lines.extend(vocab.tokens)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    mlines = [f"{l} {r}" for l, r in vocab.merges]
    merges_path(path).write_text("\n".join(mlines) + ("\n" if mlines else ""), encoding="utf-8")


def load_vocab(path) -> Vocab:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("vocab-v1 "):
        raise ValueError(f"load_vocab: {path} is not a vocab-v1 file")
    _, size_s, fp = lines[0].split(" ")
    tokens = lines[1:]
    if len(tokens) != int(size_s):
        raise ValueError(f"load_vocab: header says {size_s} tokens, file has {len(tokens)}")
    merges = []
    mpath = merges_path(path)
    if mpath.exists():
        for line in mpath.read_text(encoding="utf-8").splitlines():
            if line:
                left, right = line.split(" ")
                merges.append((left, right))
    vocab = Vocab(tokens=tokens, merges=merges, target_size=len(tokens))
    if vocab.fingerprint != fp:
        raise ValueError(f"load_vocab: fingerprint mismatch (header {fp}, "
                         f"recomputed {vocab.fingerprint})")
    return vocab


# ---------------------------------------------------------------------------
# sequence framing
# ---------------------------------------------------------------------------

@dataclass
class EncodedPair:
    """One framed input: [CLS] a [SEP] (b [SEP]) padded to a fixed length."""

    ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]

    def __post_init__(self):
        if not (len(self.ids) == len(self.segment_ids) == len(self.attention_mask)):
            raise ValueError("EncodedPair: ids, segment_ids, attention_mask must be equal length")

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def real_length(self) -> int:
        return sum(self.attention_mask)


def frame_pair(seg_a: Sequence[int], seg_b: Sequence[int] | None, max_len: int) -> EncodedPair:
    """Frame one or two segments, truncating the longest segment first
    (one token at a time, from its end) when over budget."""
    need = 3 if seg_b is not None else 2
    if max_len < need:
        raise ValueError(f"frame_pair: max_len {max_len} too small (need at least {need})")
    a = list(seg_a)
    b = list(seg_b) if seg_b is not None else None
    budget = max_len - need
    while len(a) + (len(b) if b is not None else 0) > budget:
        if b is not None and len(b) > len(a):
            b.pop()
        else:
            a.pop()
    ids = [CLS_ID] + a + [SEP_ID]
    segs = [0] * len(ids)
    if b is not None:
        ids += b + [SEP_ID]
        segs += [1] * (len(b) + 1)
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    last_seg = segs[-1]
    ids += [PAD_ID] * pad
    segs += [last_seg] * pad
    mask += [0] * pad
    return EncodedPair(ids=ids, segment_ids=segs, attention_mask=mask)
