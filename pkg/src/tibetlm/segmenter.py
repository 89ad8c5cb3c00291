"""Syllable segmentation and frequency-threshold vocabularies.

Tibetan syllables are delimited by the tsheg (U+0F0B).  Runs that cannot be
split that way (years, times, Latin fragments) fall back to one unit per
codepoint.  The frequency vocabulary reproduces the syllable-level
vocabulary-size and [UNK]-rate analysis used to motivate subword units.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_text_list

TSHEG = "་"
NON_BREAKING_TSHEG = "༌"
SHAD = "།"
NYIS_SHAD = "༎"
UNK_TOKEN = "[UNK]"

# Unit boundaries: tshegs, sentence marks and whitespace.
_BOUNDARY_RE = re.compile("[་༌།-༒༔\\s]+")


def is_tibetan_letter(ch: str) -> bool:
    """Letters, vowel signs and subjoined consonants (plus the OM ligature)."""
    cp = ord(ch)
    return cp == 0x0F00 or 0x0F40 <= cp <= 0x0FBC


@dataclass(frozen=True)
class SyllableSequence:
    units: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self):
        return iter(self.units)


def _split_unit(unit: str) -> list[str]:
    if all(is_tibetan_letter(ch) for ch in unit):
        return [unit]
    return list(unit)


def segment_syllables(text: str) -> SyllableSequence:
    """Split ``text`` into syllables.

    A tsheg-free unit that mixes in any non-letter codepoint (digits, Latin,
    symbols) is broken into single codepoints.

    >>> segment_syllables("ཀ་ཁ་ག").units
    ('ཀ', 'ཁ', 'ག')
    """
    units: list[str] = []
    for chunk in _BOUNDARY_RE.split(text):
        if chunk:
            units.extend(_split_unit(chunk))
    return SyllableSequence(tuple(units))


def count_syllables(text: str) -> int:
    return len(segment_syllables(text).units)


Tokens = Union[str, Sequence[str]]


def _units_of(item: Tokens) -> Sequence[str]:
    # Strings are syllable-segmented; pre-tokenized lists (e.g. the output of
    # an external word segmenter) are taken as-is.
    if isinstance(item, str):
        return segment_syllables(item).units
    return item


@dataclass
class FrequencyVocab:
    """Units with corpus counts, ordered by (count desc, unit asc)."""

    entries: dict[str, int] = field(default_factory=dict)
    threshold: int = 1
    unk_token: str = UNK_TOKEN

    def __post_init__(self):
        self.entries = dict(sorted(self.entries.items(), key=lambda kv: (-kv[1], kv[0])))
        self._ids = {unit: i + 1 for i, unit in enumerate(self.entries)}

    def __contains__(self, unit: str) -> bool:
        return unit in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, unit: str) -> int:
        """Id of ``unit``; 0 is reserved for ``unk_token``."""
        return self._ids.get(unit, 0)

    def save(self, path: Union[str, Path]) -> None:
        lines = [f"{unit}\t{count}\n" for unit, count in self.entries.items()]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path], threshold: int = 1) -> "FrequencyVocab":
        entries = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            unit, sep, count = line.rpartition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'unit<TAB>count'")
            entries[unit] = int(count)
        return cls(entries, threshold=threshold)


def count_units(corpus: Iterable[Tokens]) -> Counter:
    counts: Counter = Counter()
    for item in corpus:
        counts.update(_units_of(item))
    return counts


def build_frequency_vocab(corpus: Iterable[Tokens], threshold: int = 25) -> FrequencyVocab:
    """Keep every unit seen at least ``threshold`` times."""
    threshold = check_positive_int(threshold, "threshold")
    counts = count_units(corpus)
    return FrequencyVocab({u: c for u, c in counts.items() if c >= threshold}, threshold)


def oov_rate(corpus: Iterable[Tokens], vocab: FrequencyVocab) -> float:
    """Fraction of unit tokens that would be mapped to [UNK]."""
    total = missing = 0
    for item in corpus:
        for unit in _units_of(item):
            total += 1
            missing += unit not in vocab
    return missing / total if total else 0.0


class SyllableVocabulary(TransformerMixin, BaseEstimator):
    """Frequency-thresholded syllable vocabulary as a transformer.

    ``transform`` maps each sentence to unit ids, 0 standing for [UNK].
    """

    def __init__(self, threshold: int = 25):
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_text_list(X, allow_tokens=True)
        self.vocab_ = build_frequency_vocab(X, self.threshold)
        self.oov_rate_ = oov_rate(X, self.vocab_)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        X = check_text_list(X, allow_tokens=True)
        return [[self.vocab_.id_of(u) for u in _units_of(item)] for item in X]
