"""Task metrics: pooled micro-F1 over label sets and exact-span entity F1."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass
class MetricReport:
    task_id: str
    metric_name: str
    value: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _f1(tp: int, fp: int, fn: int) -> float:
    # conventions: P = 0 when TP+FP = 0, R = 0 when TP+FN = 0, F1 = 0 when P+R = 0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def micro_f1(predicted: Sequence[Iterable[str]], gold: Sequence[Iterable[str]],
             task_id: str = "") -> MetricReport:
    """Micro-averaged F1 with TP/FP/FN pooled across all instances and labels."""
    if len(predicted) != len(gold):
        raise ValueError(f"micro_f1: {len(predicted)} predictions vs {len(gold)} gold instances")
    tp = fp = fn = 0
    for p_labels, g_labels in zip(predicted, gold):
        p_set, g_set = set(p_labels), set(g_labels)
        tp += len(p_set & g_set)
        fp += len(p_set - g_set)
        fn += len(g_set - p_set)
    return MetricReport(task_id=task_id, metric_name="micro_f1",
                        value=_f1(tp, fp, fn), tp=tp, fp=fp, fn=fn)


def bio_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """(start, end, type) spans under BIO segmentation; end is exclusive.
    Illegal I (after O, a different type, or at the start) is repaired as B."""
    spans: set[tuple[int, int, str]] = set()
    start, kind = None, None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                spans.add((start, i, kind))
                start, kind = None, None
            continue
        if len(tag) < 3 or tag[1] != "-" or tag[0] not in "BI":
            raise ValueError(f"bio_spans: tag {tag!r} is outside the BIO scheme")
        prefix, ty = tag[0], tag[2:]
        if prefix == "B" or start is None or ty != kind:
            if start is not None:
                spans.add((start, i, kind))
            start, kind = i, ty
    if start is not None:
        spans.add((start, len(tags), kind))
    return spans


def entity_f1(predicted: Sequence[Sequence[str]], gold: Sequence[Sequence[str]],
              task_id: str = "") -> MetricReport:
    """Exact-match span F1 over token-aligned BIO tag sequences."""
    if len(predicted) != len(gold):
        raise ValueError(f"entity_f1: {len(predicted)} predictions vs {len(gold)} gold sequences")
    tp = fp = fn = 0
    for p_tags, g_tags in zip(predicted, gold):
        if len(p_tags) != len(g_tags):
            raise ValueError("entity_f1: sequences must be token-aligned")
        p_spans, g_spans = bio_spans(p_tags), bio_spans(g_tags)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    return MetricReport(task_id=task_id, metric_name="entity_f1",
                        value=_f1(tp, fp, fn), tp=tp, fp=fp, fn=fn)


def accuracy(predicted: Sequence, gold: Sequence, task_id: str = "") -> MetricReport:
    if len(predicted) != len(gold):
        raise ValueError("accuracy: length mismatch")
    correct = sum(1 for p, g in zip(predicted, gold) if p == g)
    return MetricReport(task_id=task_id, metric_name="accuracy",
                        value=correct / len(gold) if gold else 0.0,
                        tp=correct, fp=len(gold) - correct, fn=len(gold) - correct)
