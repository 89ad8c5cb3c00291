"""Masked-LM + next-sentence pretraining examples with whole-word masking."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import SCHEMA_VERSION
from ._validation import check_fraction, check_positive_int
from .unigram import CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, TokenizedSequence, Vocab

IGNORE_INDEX = -1
FILE_FORMAT = "tibetlm-pretrain-examples"


class NSPLabel(IntEnum):
    IS_NEXT = 0
    NOT_NEXT = 1


class MaskAction(IntEnum):
    MASK = 0
    RANDOM = 1
    KEEP = 2


@dataclass(frozen=True)
class SentencePairDraft:
    tokens_a: TokenizedSequence
    tokens_b: TokenizedSequence
    is_next: bool

    def __post_init__(self):
        if not len(self.tokens_a) or not len(self.tokens_b):
            raise ValueError("both sentences of a pair must be non-empty")


@dataclass(frozen=True)
class PretrainExample:
    input_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    mlm_labels: tuple[int, ...]
    nsp_label: NSPLabel

    def __post_init__(self):
        n = len(self.input_ids)
        if not (len(self.segment_ids) == len(self.attention_mask) == len(self.mlm_labels) == n):
            raise ValueError("example arrays must have equal length")

    def __len__(self) -> int:
        return len(self.input_ids)

    def to_json(self) -> dict:
        return {
            "input_ids": list(self.input_ids), "segment_ids": list(self.segment_ids),
            "attention_mask": list(self.attention_mask), "mlm_labels": list(self.mlm_labels),
            "nsp_label": int(self.nsp_label),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PretrainExample":
        fields = ("input_ids", "segment_ids", "attention_mask", "mlm_labels")
        arrays = {}
        for f in fields:
            v = obj[f]
            if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
                raise ValueError(f"{f} must be a list of integers")
            arrays[f] = tuple(v)
        return cls(nsp_label=NSPLabel(obj["nsp_label"]), **arrays)


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def build_nsp_pairs(docs: Sequence[Sequence[TokenizedSequence]], rng=None) -> list[SentencePairDraft]:
    """Consecutive sentence pairs; half keep the true successor, half take a
    uniformly drawn sentence from some other document."""
    rng = _rng(rng)
    docs = [[s for s in doc if len(s)] for doc in docs]
    if len(docs) < 2:
        raise ValueError("next-sentence pairs need at least two documents")
    sizes = [len(d) for d in docs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = [s for d in docs for s in d]
    pairs = []
    for d, doc in enumerate(docs):
        others = len(flat) - sizes[d]
        for i in range(len(doc) - 1):
            if rng.random() < 0.5 or others == 0:
                pairs.append(SentencePairDraft(doc[i], doc[i + 1], True))
            else:
                r = int(rng.integers(others))
                if r >= offsets[d]:
                    r += sizes[d]   # skip this document's own block
                pairs.append(SentencePairDraft(doc[i], flat[r], False))
    return pairs


def truncate_pair(a: list, b: list, max_tokens: int) -> tuple[list, list]:
    """Trim from the end of the longer sequence (B on ties) until both fit."""
    a, b = list(a), list(b)
    while len(a) + len(b) > max_tokens:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def _word_spans(starts: Sequence[bool], first: int) -> list[list[int]]:
    spans: list[list[int]] = []
    for i, flag in enumerate(starts):
        if flag or i == 0:
            spans.append([])
        spans[-1].append(first + i)
    return spans


def apply_whole_word_mask(pair: SentencePairDraft, vocab: Union[Vocab, int], rng=None,
                          select_rate: float = 0.15, actions: Sequence[float] = (0.8, 0.1, 0.1),
                          max_seq_len: int = 512, pad_to: Optional[int] = None,
                          return_actions: bool = False):
    """Pack ``[CLS] A [SEP] B [SEP]`` and mask whole words.

    Words are shuffled and taken until at least ``select_rate`` of the content
    tokens are covered.  Each selected word draws one action for all of its
    pieces: [MASK], independent random non-special ids, or unchanged.
    """
    rng = _rng(rng)
    select_rate = check_fraction(select_rate, "select_rate")
    max_seq_len = check_positive_int(max_seq_len, "max_seq_len")
    if len(actions) != 3 or any(p < 0 for p in actions) or not math.isclose(sum(actions), 1.0):
        raise ValueError("actions must be three probabilities summing to 1")
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)

    n = max_seq_len - 3
    a = list(zip(pair.tokens_a.ids, pair.tokens_a.word_start))
    b = list(zip(pair.tokens_b.ids, pair.tokens_b.word_start))
    a, b = truncate_pair(a, b, n)
    if not a or not b:
        raise ValueError(f"pair does not fit in max_seq_len={max_seq_len}")

    ids = [CLS_ID] + [t for t, _ in a] + [SEP_ID] + [t for t, _ in b] + [SEP_ID]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    words = _word_spans([s for _, s in a], 1) + _word_spans([s for _, s in b], len(a) + 2)

    content = len(a) + len(b)
    target = select_rate * content
    chosen, covered = [], 0
    for w in rng.permutation(len(words)):
        if covered >= target:
            break
        chosen.append(words[w])
        covered += len(words[w])

    labels = [IGNORE_INDEX] * len(ids)
    taken = []
    p_mask, p_random = actions[0], actions[1]
    for span in chosen:
        u = rng.random()
        action = MaskAction.MASK if u < p_mask else MaskAction.RANDOM if u < p_mask + p_random else MaskAction.KEEP
        for pos in span:
            labels[pos] = ids[pos]
            if action is MaskAction.MASK:
                ids[pos] = MASK_ID
            elif action is MaskAction.RANDOM:
                ids[pos] = int(rng.integers(NUM_SPECIAL, vocab_size))
        taken.append((tuple(span), action))

    attention = [1] * len(ids)
    length = max_seq_len if pad_to is None else pad_to
    if length < len(ids):
        raise ValueError(f"pad_to={length} is shorter than the packed pair ({len(ids)})")
    extra = length - len(ids)
    ex = PretrainExample(
        tuple(ids + [PAD_ID] * extra), tuple(segments + [0] * extra), tuple(attention + [0] * extra),
        tuple(labels + [IGNORE_INDEX] * extra),
        NSPLabel.IS_NEXT if pair.is_next else NSPLabel.NOT_NEXT,
    )
    return (ex, taken) if return_actions else ex


def build_pretraining_examples(docs: Sequence[Sequence[TokenizedSequence]], vocab: Union[Vocab, int],
                               seed: int = 0, **mask_options) -> list[PretrainExample]:
    """Pairs then masks; each pair gets its own stream spawned from ``seed``."""
    root = np.random.SeedSequence(seed)
    nsp_seq, mask_seq = root.spawn(2)
    pairs = build_nsp_pairs(docs, np.random.default_rng(nsp_seq))
    children = mask_seq.spawn(len(pairs))
    return [apply_whole_word_mask(p, vocab, np.random.default_rng(c), **mask_options)
            for p, c in zip(pairs, children)]


def unmask(example: PretrainExample) -> tuple[int, ...]:
    """Input ids with every labelled position restored to its original id."""
    return tuple(lab if lab != IGNORE_INDEX else tok for tok, lab in zip(example.input_ids, example.mlm_labels))


# -- file format --------------------------------------------------------------

def write_examples(examples: Sequence[PretrainExample], path: Union[str, Path]) -> None:
    header = {"format": FILE_FORMAT, "schema_version": SCHEMA_VERSION, "num_examples": len(examples)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), separators=(",", ":")) + "\n")


def read_examples(path: Union[str, Path]) -> list[PretrainExample]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        header = json.loads(lines[0])
        if header.get("format") != FILE_FORMAT:
            raise ValueError(f"not a {FILE_FORMAT} file")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {header.get('schema_version')}")
        expected = int(header["num_examples"])
    except (IndexError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: missing or malformed header ({exc})") from None
    out = []
    for i, line in enumerate(lines[1:]):
        try:
            out.append(PretrainExample.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed record {i}: {exc}") from None
    if len(out) != expected:
        raise ValueError(f"{path}: truncated, record {len(out)} of {expected} is missing")
    return out
