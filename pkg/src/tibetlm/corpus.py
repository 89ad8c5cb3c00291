"""Corpus ingestion: cleaning, sentence splitting and statistics."""
from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_positive_int
from .segmenter import NYIS_SHAD, SHAD, TSHEG, count_syllables

DEFAULT_PUNCTUATION = frozenset({TSHEG, SHAD, NYIS_SHAD, "༔", " ", *"0123456789"})

_MARKUP_RE = re.compile(
    r"<[^>]*>"                        # html/xml tags, including <img ... alt=...>
    r"|!\[[^\]]*\]\([^)]*\)"          # markdown images
    r"|\[(?:img|image|pic|photo|figure)\b[^\]]*\]"
    r"|(?:https?|ftp)://\S+|www\.\S+"
    r"|\S+@\S+\.\w+",
    re.IGNORECASE,
)
_SENTENCE_RE = re.compile(f"[{SHAD}{NYIS_SHAD}\n]")


class CorpusDecodeError(ValueError):
    """Raised for malformed UTF-8 input; ``offset`` is the failing byte."""

    def __init__(self, offset: int, source_id: str = "", reason: str = ""):
        self.offset = offset
        self.source_id = source_id
        where = f" in {source_id!r}" if source_id else ""
        super().__init__(f"invalid UTF-8 at byte offset {offset}{where}: {reason}")


@dataclass(frozen=True)
class RawDocument:
    source_id: str
    text: Union[str, bytes]
    category: Optional[str] = None


@dataclass(frozen=True)
class CleanDocument:
    source_id: str
    sentences: tuple[str, ...]
    syllable_count: int

    def to_json(self) -> dict:
        return {"source_id": self.source_id, "sentences": list(self.sentences),
                "syllable_count": self.syllable_count}

    @classmethod
    def from_json(cls, obj: dict) -> "CleanDocument":
        return cls(obj["source_id"], tuple(obj["sentences"]), int(obj["syllable_count"]))


@dataclass
class CorpusStats:
    num_documents: int = 0
    num_sentences: int = 0
    num_syllables: int = 0
    character_histogram: Counter = field(default_factory=Counter)

    @property
    def num_unique_characters(self) -> int:
        return len(self.character_histogram)

    def __add__(self, other: "CorpusStats") -> "CorpusStats":
        return CorpusStats(
            self.num_documents + other.num_documents,
            self.num_sentences + other.num_sentences,
            self.num_syllables + other.num_syllables,
            self.character_histogram + other.character_histogram,
        )

    def to_json(self) -> dict:
        hist = sorted(self.character_histogram.items(), key=lambda kv: (-kv[1], kv[0]))
        return {
            "num_documents": self.num_documents,
            "num_sentences": self.num_sentences,
            "num_syllables": self.num_syllables,
            "num_unique_characters": self.num_unique_characters,
            "character_histogram": dict(hist),
        }


def decode_text(data: bytes, source_id: str = "") -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusDecodeError(exc.start, source_id, exc.reason) from None


def _check_unicode(text: str, source_id: str) -> None:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        # lone surrogates: report the byte offset they would occupy
        offset = len(text[: exc.start].encode("utf-8", "surrogatepass"))
        raise CorpusDecodeError(offset, source_id, exc.reason) from None


def _keep_char(ch: str, punctuation: frozenset) -> bool:
    return "ༀ" <= ch <= "࿿" or ch in "0123456789" or ch.isspace() or ch in punctuation


def normalize_text(text: str, punctuation: frozenset = DEFAULT_PUNCTUATION,
                   normalization: Optional[str] = "NFC") -> str:
    """Strip markup and disallowed characters; collapse whitespace per line."""
    if normalization:
        text = unicodedata.normalize(normalization, text)
    text = _MARKUP_RE.sub(" ", text)
    text = "".join(ch for ch in text if _keep_char(ch, punctuation))
    lines = (" ".join(line.split()) for line in text.splitlines())
    return "\n".join(line for line in lines if line)


def split_sentences(text: str) -> list[str]:
    """Split on shad, nyis-shad and newline; delimiters are dropped.

    >>> split_sentences("ཀ་ཁ། ག་ང།")
    ['ཀ་ཁ', 'ག་ང']
    """
    parts = (p.strip() for p in _SENTENCE_RE.split(text))
    return [p for p in parts if p]


def clean_document(doc: RawDocument, min_syllables: int = 100,
                   punctuation: Iterable[str] = DEFAULT_PUNCTUATION,
                   normalization: Optional[str] = "NFC") -> Optional[CleanDocument]:
    """Clean ``doc``; returns None unless it keeps more than ``min_syllables`` syllables."""
    min_syllables = check_positive_int(min_syllables, "min_syllables")
    text = doc.text
    if isinstance(text, bytes):
        text = decode_text(text, doc.source_id)
    _check_unicode(text, doc.source_id)
    cleaned = normalize_text(text, frozenset(punctuation), normalization)
    sentences = tuple(split_sentences(cleaned))
    count = sum(count_syllables(s) for s in sentences)
    if count <= min_syllables:
        return None
    return CleanDocument(doc.source_id, sentences, count)


def corpus_stats(docs: Iterable[CleanDocument]) -> CorpusStats:
    stats = CorpusStats()
    for doc in docs:
        stats.num_documents += 1
        stats.num_sentences += len(doc.sentences)
        stats.num_syllables += doc.syllable_count
        for sentence in doc.sentences:
            stats.character_histogram.update(sentence)
    return stats


class CorpusCleaner(TransformerMixin, BaseEstimator):
    """Stateless cleaner: ``transform`` maps raw documents to kept CleanDocuments."""

    def __init__(self, min_syllables: int = 100, punctuation=None, normalization: Optional[str] = "NFC"):
        self.min_syllables = min_syllables
        self.punctuation = punctuation
        self.normalization = normalization

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> list[CleanDocument]:
        punct = DEFAULT_PUNCTUATION if self.punctuation is None else frozenset(self.punctuation)
        out = []
        for i, doc in enumerate(X):
            if isinstance(doc, str):
                doc = RawDocument(str(i), doc)
            clean = clean_document(doc, self.min_syllables, punct, self.normalization)
            if clean is not None:
                out.append(clean)
        return out


# -- file formats -------------------------------------------------------------

def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    data = path.read_bytes()
    text = decode_text(data, str(path.name))
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path.name}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ValueError(f"{path.name}:{lineno}: expected a JSON object")
        yield lineno, obj


def read_raw_documents(path: Union[str, Path]) -> list[RawDocument]:
    """Read JSONL (``source_id``, ``text``, optional ``category``) or plain text.

    A plain-text file is one document; a directory contributes every ``*.txt``
    and ``*.jsonl`` file in sorted order.
    """
    path = Path(path)
    if path.is_dir():
        docs: list[RawDocument] = []
        for child in sorted(path.iterdir()):
            if child.suffix in (".txt", ".jsonl"):
                docs.extend(read_raw_documents(child))
        return docs
    if path.suffix == ".jsonl":
        docs = []
        for lineno, obj in _iter_jsonl(path):
            if "text" not in obj:
                raise ValueError(f"{path.name}:{lineno}: missing 'text'")
            docs.append(RawDocument(str(obj.get("source_id", f"{path.stem}:{lineno}")),
                                    obj["text"], obj.get("category")))
        ids = [d.source_id for d in docs]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"{path.name}: duplicate source_id {dup!r}")
        return docs
    return [RawDocument(path.stem, path.read_bytes())]


def write_clean_documents(docs: Iterable[CleanDocument], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False) + "\n")


def read_clean_documents(path: Union[str, Path]) -> list[CleanDocument]:
    path = Path(path)
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(CleanDocument.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path.name}:{lineno}: bad CleanDocument ({exc})") from None
    return out
