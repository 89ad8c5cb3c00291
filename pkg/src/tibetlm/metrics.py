"""Classification metrics (accuracy, macro P/R/F1) and generation metrics
(BLEU with brevity penalty, ROUGE-L)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

SENTENCE_SMOOTHING = 1e-9


# -- classification -----------------------------------------------------------

class ConfusionMatrix:
    """k x k counts; rows are true classes, columns predicted classes."""

    def __init__(self, counts, labels: Optional[Sequence[Hashable]] = None):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if counts.size and (np.any(counts < 0) or not np.all(counts == np.round(counts))):
            raise ValueError("confusion matrix entries must be non-negative integers")
        self.counts = counts.astype(np.int64)
        self.labels = list(labels) if labels is not None else list(range(len(counts)))
        if len(self.labels) != len(counts):
            raise ValueError("one label per row is required")

    @classmethod
    def from_predictions(cls, y_true, y_pred, labels: Sequence[Hashable]) -> "ConfusionMatrix":
        index = {lab: i for i, lab in enumerate(labels)}
        cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(y_true, y_pred, strict=True):
            if t not in index or p not in index:
                raise ValueError(f"label {t if t not in index else p!r} not in the declared label set")
            cm[index[t], index[p]] += 1
        return cls(cm, labels)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise ValueError("label sets differ")
        return ConfusionMatrix(self.counts + other.counts, self.labels)


@dataclass
class ClassificationReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1))

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
        }


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def macro_metrics(cm) -> ClassificationReport:
    """Accuracy plus unweighted means of per-class one-vs-rest P, R and F1.

    A class with no predicted positives has precision 0; with no true
    positives, recall 0; F1 is 0 whenever P + R = 0.
    """
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(cm)
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    per_class = {
        str(lab): {
            "precision": float(precision[i]), "recall": float(recall[i]), "f1": float(f1[i]),
            "one_vs_rest_accuracy": float((tp[i] + tn[i]) / total), "support": int(c[i].sum()),
        }
        for i, lab in enumerate(cm.labels)
    }
    return ClassificationReport(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        per_class=per_class,
    )


# -- generation ---------------------------------------------------------------

@dataclass
class GenScore:
    bleu_n: list[float]
    rouge_l: float

    def to_json(self) -> dict:
        out = {f"bleu_{n}": v for n, v in enumerate(self.bleu_n, 1)}
        out["rouge_l"] = self.rouge_l
        return out


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped(candidate, references, n):
    cand = _ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in _ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    return sum(min(c, max_ref[g]) for g, c in cand.items()), max(len(candidate) - n + 1, 0)


def effective_reference_length(candidate_len: int, references) -> int:
    """Closest reference length; ties go to the shorter reference."""
    return min((len(r) for r in references), key=lambda L: (abs(L - candidate_len), L))


def brevity_penalty(candidate_len: int, reference_len: int) -> float:
    if candidate_len >= reference_len:
        return 1.0
    if candidate_len == 0:
        return 0.0
    return math.exp(1 - reference_len / candidate_len)


def _weights(max_n, weights):
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    if weights is None:
        return [1.0 / max_n] * max_n
    if len(weights) != max_n:
        raise ValueError("need one weight per n-gram order")
    return list(weights)


def _combine(matches, totals, bp, weights, smoothing):
    log_sum = 0.0
    for m, t, w in zip(matches, totals, weights):
        p = m / t if t else 0.0
        if p == 0.0:
            if smoothing <= 0:
                return 0.0
            p = smoothing / max(t, 1)
        log_sum += w * math.log(p)
    return bp * math.exp(log_sum)


def bleu(candidate: Sequence, references: Sequence[Sequence], max_n: int = 4,
         weights: Optional[Sequence[float]] = None, smoothing: float = SENTENCE_SMOOTHING) -> float:
    """Sentence BLEU: clipped n-gram precisions, weighted geometric mean, brevity penalty.

    A zero precision is replaced by ``smoothing / total`` (pass 0 to disable).
    """
    weights = _weights(max_n, weights)
    if not candidate or not references or any(len(r) == 0 for r in references):
        raise ValueError("candidate and references must be non-empty")
    matches, totals = zip(*(_clipped(candidate, references, n) for n in range(1, max_n + 1)))
    bp = brevity_penalty(len(candidate), effective_reference_length(len(candidate), references))
    return _combine(matches, totals, bp, weights, smoothing)


def corpus_bleu(pairs: Sequence[tuple[Sequence, Sequence[Sequence]]], max_n: int = 4,
                weights: Optional[Sequence[float]] = None) -> float:
    """Corpus BLEU from pooled clipped counts and pooled lengths; unsmoothed."""
    weights = _weights(max_n, weights)
    if not pairs:
        raise ValueError("no candidate/reference pairs")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for candidate, references in pairs:
        for n in range(1, max_n + 1):
            m, t = _clipped(candidate, references, n)
            matches[n - 1] += m
            totals[n - 1] += t
        c_len += len(candidate)
        r_len += effective_reference_length(len(candidate), references)
    return _combine(matches, totals, brevity_penalty(c_len, r_len), weights, 0.0)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = 1.2) -> float:
    """LCS-based F-measure with recall weighted by ``beta``."""
    if not candidate or not reference:
        raise ValueError("candidate and reference must be non-empty")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    r = lcs / len(reference)
    p = lcs / len(candidate)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


def corpus_scores(pairs: Sequence[tuple[Sequence, Sequence[Sequence]]], beta: float = 1.2,
                  max_n: int = 4) -> GenScore:
    """Corpus BLEU-1..max_n and ROUGE-L averaged over pairs (best reference per pair)."""
    if not pairs:
        raise ValueError("no candidate/reference pairs")
    bleus = [corpus_bleu(pairs, n) for n in range(1, max_n + 1)]
    rouge = math.fsum(max(rouge_l(c, r, beta) for r in refs) for c, refs in pairs) / len(pairs)
    return GenScore(bleus, rouge)


def sentence_scores(candidate: Sequence, references: Sequence[Sequence], beta: float = 1.2,
                    max_n: int = 4) -> GenScore:
    return GenScore([bleu(candidate, references, n) for n in range(1, max_n + 1)],
                    max(rouge_l(candidate, r, beta) for r in references))
