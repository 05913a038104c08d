"""Resource-efficiency benchmark: analytic max batch size under a memory
budget plus measured training/inference throughput ratios.

Memory model (documented; deliberately mirrors this implementation's
training residency, all float32):
  fixed cost   = 16 bytes per unique parameter (weights + gradients + two
                 Adam moments), where shared-weight presets count one layer;
  per sample   = activations saved for the backward sweep:
                   embeddings     4 * S*H
                   per layer      14 * S*H + 2 * S*I + 4 * AH*S^2
                   MLM head       M * (2*H + 2*V), M = ceil(0.15 * S)
                 times 4 bytes.
The estimate is analytic and deterministic; throughput is wall-clock over a
fixed workload, reported relative to the reference preset at matching batch
regimes (batch 1 and each preset's own max batch).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .adam import AdamHyper, AdamState, adam_step
from .checkpoint import Checkpoint, Lineage
from .encoder import (EncodedBatch, EncoderConfig, count_parameters, forward,
                      init_weights, mlm_logits, preset_config)
from .util import derive_seed

NOISE_THRESHOLD = 0.10   # relative spread over repetitions before a row is flagged


@dataclass(frozen=True)
class BenchPreset:
    name: str
    config: EncoderConfig
    shared: bool = False    # report unique parameters as if weights were shared


def standard_presets(vocab_size: int = 30000, max_positions: int = 512) -> dict[str, BenchPreset]:
    def cfg(name):
        return preset_config(name, vocab_size=vocab_size, max_positions=max_positions)
    return {
        "bench-base": BenchPreset("bench-base", cfg("bench-base")),
        "bench-small": BenchPreset("bench-small", cfg("bench-small")),
        "bench-distil": BenchPreset("bench-distil", cfg("bench-distil")),
        "bench-albert": BenchPreset("bench-albert", cfg("bench-albert"), shared=True),
        "bench-albert-large": BenchPreset("bench-albert-large", cfg("bench-albert-large"),
                                          shared=True),
    }


def unique_parameters(preset: BenchPreset) -> int:
    """Parameter count as deployed: shared presets count one layer's weights."""
    if preset.shared:
        return count_parameters(replace(preset.config, layers=1))
    return count_parameters(preset.config)


def estimate_memory_bytes(preset: BenchPreset, batch_size: int, seq_len: int) -> int:
    cfg = preset.config
    fixed = 16 * unique_parameters(preset)
    h, i, ah, v = cfg.hidden, cfg.intermediate, cfg.heads, cfg.vocab_size
    s = seq_len
    m = math.ceil(0.15 * s)
    per_layer = 14 * s * h + 2 * s * i + 4 * ah * s * s
    per_sample = 4 * (4 * s * h + cfg.layers * per_layer + m * (2 * h + 2 * v))
    return fixed + batch_size * per_sample


def max_batch_size(preset: BenchPreset, budget_bytes: int, seq_len: int) -> int:
    """Largest batch fitting the analytic estimate: doubling then bisection.
    Returns 0 when even batch 1 does not fit."""
    if estimate_memory_bytes(preset, 1, seq_len) > budget_bytes:
        return 0
    hi = 1
    while estimate_memory_bytes(preset, hi * 2, seq_len) <= budget_bytes:
        hi *= 2
    lo = hi
    hi = hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if estimate_memory_bytes(preset, mid, seq_len) <= budget_bytes:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class BenchWorkload:
    seq_len: int = 64
    steps: int = 2      # optimizer steps timed per repetition
    reps: int = 3
    seed: int = 0


@dataclass
class BenchRow:
    preset: str
    params: int
    layers: int
    hidden: int
    heads: int
    max_bs: int
    train_speed_bs1: float       # ratios vs the reference preset
    train_speed_max: float
    infer_speed_bs1: float
    noisy: bool = False
    feasible: bool = True


@dataclass
class _Measured:
    train_bs1: float             # raw samples/sec
    train_max: float
    infer_bs1: float
    noisy: bool


def _make_batch(cfg: EncoderConfig, batch_size: int, seq_len: int, seed: int):
    rng = np.random.Generator(np.random.PCG64(derive_seed("bench", seed)))
    ids = rng.integers(5, cfg.vocab_size, size=(batch_size, seq_len))
    ids[:, 0] = 2  # CLS
    ids[:, -1] = 3  # SEP
    batch = EncodedBatch(ids=ids.astype(np.int64),
                         segments=np.zeros((batch_size, seq_len), dtype=np.int64),
                         mask=np.ones((batch_size, seq_len), dtype=np.float32),
                         vocab_fingerprint="bench")
    n_masked = math.ceil(0.15 * seq_len)
    positions = [(b, 1 + p) for b in range(batch_size) for p in range(n_masked)]
    labels = rng.integers(5, cfg.vocab_size, size=len(positions)).astype(np.int64)
    return batch, positions, labels


def _measure(preset: BenchPreset, max_bs: int, workload: BenchWorkload) -> _Measured:
    cfg = replace(preset.config, dropout=0.0)
    weights = init_weights(cfg, workload.seed)
    ckpt = Checkpoint(config=cfg, weights=weights, vocab_fingerprint="bench",
                      lineage=Lineage(strategy="GENERIC", parent_id=None, steps=0))
    adam = AdamState.init(weights, AdamHyper(learning_rate=1e-4))

    def train_step(batch, positions, labels):
        with T.Tape() as tape:
            out = forward(ckpt, batch)
            loss = T.cross_entropy(mlm_logits(out.hidden, positions, ckpt), labels)
        T.backward(tape, loss)
        adam_step(weights, {k: w.grad for k, w in weights.items() if w.grad is not None}, adam)
        for w in weights.values():
            w.zero_grad()

    def timed(fn, samples_per_step: int) -> tuple[float, bool]:
        fn()  # warm-up outside the timed region
        rates = []
        for _ in range(workload.reps):
            start = time.perf_counter()
            for _ in range(workload.steps):
                fn()
            elapsed = time.perf_counter() - start
            rates.append(workload.steps * samples_per_step / elapsed)
        mean = sum(rates) / len(rates)
        spread = (max(rates) - min(rates)) / mean if mean > 0 else 0.0
        return mean, spread > NOISE_THRESHOLD

    b1, p1, l1 = _make_batch(cfg, 1, workload.seq_len, workload.seed)
    train_bs1, noisy1 = timed(lambda: train_step(b1, p1, l1), 1)
    if max_bs > 1:
        bm, pm, lm = _make_batch(cfg, max_bs, workload.seq_len, workload.seed + 1)
        train_max, noisy2 = timed(lambda: train_step(bm, pm, lm), max_bs)
    else:
        train_max, noisy2 = train_bs1, noisy1
    infer_bs1, noisy3 = timed(lambda: forward(ckpt, b1), 1)
    return _Measured(train_bs1=train_bs1, train_max=train_max, infer_bs1=infer_bs1,
                     noisy=noisy1 or noisy2 or noisy3)


def bench(presets: list[BenchPreset], budget_bytes: int, workload: BenchWorkload,
          reference: str) -> list[BenchRow]:
    """Benchmark every preset against the reference; infeasible presets (batch
    1 over budget) are reported with zero ratios and feasible=False."""
    names = [p.name for p in presets]
    if reference not in names:
        raise ValueError(f"bench: reference preset '{reference}' not in {names}")
    measured: dict[str, _Measured | None] = {}
    max_bs_by: dict[str, int] = {}
    for preset in presets:
        mbs = max_batch_size(preset, budget_bytes, workload.seq_len)
        max_bs_by[preset.name] = mbs
        measured[preset.name] = _measure(preset, mbs, workload) if mbs >= 1 else None
    ref = measured[reference]
    if ref is None:
        raise ValueError(f"bench: reference preset '{reference}' does not fit batch 1 "
                         f"under the budget")
    rows = []
    for preset in presets:
        m = measured[preset.name]
        cfg = preset.config
        if m is None:
            rows.append(BenchRow(preset=preset.name, params=unique_parameters(preset),
                                 layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads,
                                 max_bs=0, train_speed_bs1=0.0, train_speed_max=0.0,
                                 infer_speed_bs1=0.0, feasible=False))
            continue
        rows.append(BenchRow(
            preset=preset.name, params=unique_parameters(preset),
            layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads,
            max_bs=max_bs_by[preset.name],
            train_speed_bs1=m.train_bs1 / ref.train_bs1,
            train_speed_max=m.train_max / ref.train_max,
            infer_speed_bs1=m.infer_bs1 / ref.infer_bs1,
            noisy=m.noisy))
    return rows


def rows_to_csv(rows: list[BenchRow]) -> str:
    lines = ["preset,params,T,HU,AH,max_bs,train_speed_bs1,train_speed_max,infer_speed_bs1"]
    for r in rows:
        lines.append(f"{r.preset},{r.params},{r.layers},{r.hidden},{r.heads},{r.max_bs},"
                     f"{r.train_speed_bs1!r},{r.train_speed_max!r},{r.infer_speed_bs1!r}")
    return "\n".join(lines) + "\n"
