"""Evaluation metrics: BIO span decoding, span-level F1, relation micro-F1,
and accuracy."""

from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Span(NamedTuple):
    label: str
    start: int
    end: int  # inclusive


@dataclass(frozen=True)
class F1Report:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "F1Report":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(tp, fp, fn, precision, recall, f1)

    def csv_row(self) -> str:
        return (f"{self.tp},{self.fp},{self.fn},"
                f"{self.precision!r},{self.recall!r},{self.f1!r}")

    CSV_HEADER = "tp,fp,fn,precision,recall,f1"


class TagScheme:
    """BIO tag layout: index 0 = O, then B-X, I-X per entity type in order."""

    def __init__(self, entity_types):
        self.entity_types = list(entity_types)
        self.tags = ["O"]
        for etype in self.entity_types:
            self.tags.append(f"B-{etype}")
            self.tags.append(f"I-{etype}")
        self._index = {tag: i for i, tag in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        if tag not in self._index:
            raise ValueError(f"unknown tag symbol {tag!r}")
        return self._index[tag]

    def symbol(self, index: int) -> str:
        return self.tags[index]

    def symbols(self, indices) -> list[str]:
        return [self.tags[int(i)] for i in indices]


def bio_decode(tags: list[str]) -> list[Span]:
    """Decode a BIO tag sequence into typed spans.

    B-X always starts a span; I-X continues a same-type span, and an orphan
    I-X (no open span of type X) starts a new one; O closes any open span.
    """
    spans = []
    open_type = None
    open_start = -1
    for i, tag in enumerate(tags):
        if tag == "O":
            kind, etype = "O", None
        elif tag.startswith("B-") and len(tag) > 2:
            kind, etype = "B", tag[2:]
        elif tag.startswith("I-") and len(tag) > 2:
            kind, etype = "I", tag[2:]
        else:
            raise ValueError(f"unknown tag symbol {tag!r} at position {i}")
        if kind == "B" or (kind == "I" and etype != open_type):
            if open_type is not None:
                spans.append(Span(open_type, open_start, i - 1))
            open_type, open_start = etype, i
        elif kind == "O":
            if open_type is not None:
                spans.append(Span(open_type, open_start, i - 1))
            open_type = None
    if open_type is not None:
        spans.append(Span(open_type, open_start, len(tags) - 1))
    return spans


def bio_encode(spans: list[Span], length: int) -> list[str]:
    """Inverse of bio_decode for non-overlapping spans."""
    tags = ["O"] * length
    for span in spans:
        if not 0 <= span.start <= span.end < length:
            raise ValueError(f"span {span} out of range for length {length}")
        if any(tags[i] != "O" for i in range(span.start, span.end + 1)):
            raise ValueError(f"span {span} overlaps another span")
        tags[span.start] = f"B-{span.label}"
        for i in range(span.start + 1, span.end + 1):
            tags[i] = f"I-{span.label}"
    return tags


def span_f1(gold: list[list[Span]], pred: list[list[Span]]) -> F1Report:
    """Micro-averaged exact-match span F1 over aligned sentence lists.

    A predicted span is a true positive iff its type, start and end all match
    a gold span of the same sentence, with each gold span matched at most once.
    """
    if len(gold) != len(pred):
        raise ValueError("gold and pred sentence lists are not aligned")
    tp = fp = fn = 0
    for gold_spans, pred_spans in zip(gold, pred):
        g = Counter(gold_spans)
        p = Counter(pred_spans)
        matched = sum((g & p).values())
        tp += matched
        fp += sum(p.values()) - matched
        fn += sum(g.values()) - matched
    return F1Report.from_counts(tp, fp, fn)


def relation_micro_f1(gold, pred, negative_class: int) -> F1Report:
    """Positive-class micro F1: the negative class never counts as tp or fp;
    a gold positive predicted negative is a false negative."""
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.shape != pred.shape:
        raise ValueError("gold and pred label lists are not aligned")
    tp = int(np.sum((gold == pred) & (gold != negative_class)))
    fp = int(np.sum((pred != negative_class) & (pred != gold)))
    fn = int(np.sum((gold != negative_class) & (pred != gold)))
    return F1Report.from_counts(tp, fp, fn)


def accuracy(gold, pred) -> float:
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.shape != pred.shape:
        raise ValueError("gold and pred label lists are not aligned")
    if gold.size == 0:
        raise ValueError("empty label lists")
    return float(np.mean(gold == pred))
