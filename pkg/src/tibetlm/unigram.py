"""Unigram language-model subword tokenizer.

Training follows the usual recipe for this model: seed a large candidate set
from bounded substrings, fit piece probabilities with EM over segmentation
lattices (forward-backward E-step, maximum-likelihood M-step), prune the
pieces whose removal costs the least corpus log-likelihood, repeat until the
target size is reached.  All lattice arithmetic is in log space.

Text is normalized by Unicode composition and by replacing every run of
whitespace with a single word marker (U+2581) that is prepended to each word,
so ``"ab cd"`` becomes ``"▁ab▁cd"``.
"""
from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fraction, check_positive_int, check_text_list
from .segmenter import TSHEG

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)
WORD_MARKER = "▁"
UNK_PLACEHOLDER = "⁇"
DEFAULT_TARGET_SIZE = 30_005

_NEG_INF = float("-inf")


# -- vocabulary ---------------------------------------------------------------

class Vocab:
    """Immutable piece inventory with log-probabilities.

    Ids 0-4 are the special tokens; pieces follow in (log_prob desc, piece)
    order, which is also the file order.
    """

    def __init__(self, pieces: Iterable[tuple[str, float]], *, word_marker: str = WORD_MARKER,
                 boundary_chars: Sequence[str] = (TSHEG,), normalization: Optional[str] = "NFC",
                 unk_placeholder: str = UNK_PLACEHOLDER, meta: Optional[dict] = None):
        items = sorted(((str(p), float(lp)) for p, lp in pieces), key=lambda x: (-x[1], x[0]))
        seen = set()
        for piece, lp in items:
            if not piece or piece in seen or piece in SPECIAL_TOKENS:
                raise ValueError(f"invalid or duplicate piece {piece!r}")
            if not math.isfinite(lp):
                raise ValueError(f"piece {piece!r} has non-finite log_prob {lp}")
            seen.add(piece)
        if len(word_marker) != 1:
            raise ValueError("word_marker must be a single character")
        self.pieces: tuple[tuple[str, float], ...] = tuple(items)
        self.word_marker = word_marker
        self.boundary_chars = tuple(boundary_chars)
        self.normalization = normalization
        self.unk_placeholder = unk_placeholder
        self.meta = dict(meta or {})
        self._index = {p: i for i, (p, _) in enumerate(items)}
        self._log_probs = [lp for _, lp in items]
        self.max_piece_len = max((len(p) for p, _ in items), default=1)
        # fallback score for unknown characters
        self.unk_log_prob = (min(self._log_probs) if items else 0.0) - 10.0

    def __len__(self) -> int:
        return NUM_SPECIAL + len(self.pieces)

    @property
    def size(self) -> int:
        return len(self)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.pieces == other.pieces and \
            self.word_marker == other.word_marker and self.boundary_chars == other.boundary_chars

    def piece_to_id(self, piece: str) -> int:
        if piece in SPECIAL_TOKENS:
            return SPECIAL_TOKENS.index(piece)
        k = self._index.get(piece)
        return UNK_ID if k is None else k + NUM_SPECIAL

    def id_to_piece(self, i: int) -> str:
        if not 0 <= i < len(self):
            raise IndexError(f"id {i} out of range for vocab of size {len(self)}")
        return SPECIAL_TOKENS[i] if i < NUM_SPECIAL else self.pieces[i - NUM_SPECIAL][0]

    def log_prob(self, i: int) -> float:
        if i == UNK_ID:
            return self.unk_log_prob
        return self._log_probs[i - NUM_SPECIAL]

    @property
    def log_probs(self) -> np.ndarray:
        return np.array(self._log_probs, dtype=np.float64)

    @property
    def characters(self) -> frozenset:
        return frozenset(ch for p, _ in self.pieces for ch in p)

    def replace_log_probs(self, pieces: Iterable[tuple[str, float]]) -> "Vocab":
        return Vocab(pieces, word_marker=self.word_marker, boundary_chars=self.boundary_chars,
                     normalization=self.normalization, unk_placeholder=self.unk_placeholder,
                     meta=self.meta)

    def normalize(self, text: str) -> str:
        return normalize(text, self.word_marker, self.normalization)

    # file format: TSV + JSON sidecar
    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        lines = [f"{tok}\t0\n" for tok in SPECIAL_TOKENS]
        lines += [f"{piece}\t{lp!r}\n" for piece, lp in self.pieces]
        path.write_text("".join(lines), encoding="utf-8")
        sidecar = {
            "word_marker": self.word_marker,
            "boundary_chars": list(self.boundary_chars),
            "normalization": self.normalization,
            "unk_placeholder": self.unk_placeholder,
            "size": len(self),
            **self.meta,
        }
        sidecar_path(path).write_text(
            json.dumps(sidecar, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        path = Path(path)
        rows = path.read_text(encoding="utf-8").split("\n")
        if rows and rows[-1] == "":
            rows.pop()
        if len(rows) < NUM_SPECIAL or [r.split("\t")[0] for r in rows[:NUM_SPECIAL]] != list(SPECIAL_TOKENS):
            raise ValueError(f"{path}: vocab file must start with {', '.join(SPECIAL_TOKENS)}")
        pieces = []
        for lineno, row in enumerate(rows[NUM_SPECIAL:], NUM_SPECIAL + 1):
            piece, sep, lp = row.rpartition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'piece<TAB>log_prob'")
            pieces.append((piece, float(lp)))
        meta = {}
        side = sidecar_path(path)
        if side.exists():
            meta = json.loads(side.read_text(encoding="utf-8"))
        opts = {k: meta.pop(k) for k in ("word_marker", "boundary_chars", "normalization",
                                          "unk_placeholder") if k in meta}
        meta.pop("size", None)
        return cls(pieces, meta=meta, **opts)


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def normalize(text: str, word_marker: str = WORD_MARKER, normalization: Optional[str] = "NFC") -> str:
    """Compose, then prefix every whitespace-delimited word with the marker."""
    if normalization:
        text = unicodedata.normalize(normalization, text)
    words = text.replace(word_marker, " ").split()
    return "".join(word_marker + w for w in words)


def denormalize(normalized: str, word_marker: str = WORD_MARKER) -> str:
    text = normalized.replace(word_marker, " ")
    return text[1:] if text.startswith(" ") else text


def normalized_text(text: str, word_marker: str = WORD_MARKER, normalization: Optional[str] = "NFC") -> str:
    """Plain-text form that ``decode(encode(text))`` reproduces."""
    return denormalize(normalize(text, word_marker, normalization), word_marker)


# -- lattice ------------------------------------------------------------------

@dataclass
class Lattice:
    """Segmentation lattice over a normalized string.

    ``edges`` holds ``(start, end, piece_id)`` for every vocab piece matching
    ``text[start:end]`` plus single-character [UNK] edges where no piece of
    length one exists.
    """

    text: str
    edges: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.text) + 1


def _match_edges(s: str, index: dict, max_len: int) -> list[tuple[int, int, int]]:
    """Edges as (start, end, k) with k a piece index, or -1 for [UNK]."""
    n = len(s)
    out = []
    for i in range(n):
        has_char = False
        for j in range(i + 1, min(n, i + max_len) + 1):
            k = index.get(s[i:j])
            if k is not None:
                out.append((i, j, k))
                has_char = has_char or j == i + 1
        if not has_char:
            out.append((i, i + 1, -1))
    return out


def build_lattice(text: str, vocab: Vocab, *, normalized: bool = False) -> Lattice:
    s = text if normalized else vocab.normalize(text)
    edges = [(i, j, UNK_ID if k < 0 else k + NUM_SPECIAL)
             for i, j, k in _match_edges(s, vocab._index, vocab.max_piece_len)]
    return Lattice(s, edges)


class _Unit:
    """Pre-indexed lattice of one distinct training string."""

    __slots__ = ("n", "ends", "starts", "weight")

    def __init__(self, s: str, index: dict, max_len: int, weight: float):
        self.n = len(s)
        self.weight = weight
        self.ends: list[list[tuple[int, int]]] = [[] for _ in range(self.n + 1)]
        self.starts: list[list[tuple[int, int]]] = [[] for _ in range(self.n + 1)]
        for i, j, k in _match_edges(s, index, max_len):
            self.ends[j].append((i, k))
            self.starts[i].append((j, k))


def _lse(vals: list[float]) -> float:
    if not vals:
        return _NEG_INF
    m = max(vals)
    if m == _NEG_INF:
        return m
    return m + math.log(sum(math.exp(v - m) for v in vals))


def _forward(unit: _Unit, lps: list[float]) -> list[float]:
    alpha = [_NEG_INF] * (unit.n + 1)
    alpha[0] = 0.0
    for j in range(1, unit.n + 1):
        alpha[j] = _lse([alpha[i] + lps[k] for i, k in unit.ends[j]])
    return alpha


def _backward(unit: _Unit, lps: list[float]) -> list[float]:
    beta = [_NEG_INF] * (unit.n + 1)
    beta[unit.n] = 0.0
    for i in range(unit.n - 1, -1, -1):
        beta[i] = _lse([lps[k] + beta[j] for j, k in unit.starts[i]])
    return beta


def _viterbi(unit: _Unit, lps: list[float], exclude: int = -2) -> tuple[float, list[tuple[int, int]]]:
    """Best path score and its (start, k) steps; ties keep the earliest start."""
    best = [_NEG_INF] * (unit.n + 1)
    back: list[Optional[tuple[int, int]]] = [None] * (unit.n + 1)
    best[0] = 0.0
    for j in range(1, unit.n + 1):
        for i, k in unit.ends[j]:
            if k == exclude:
                continue
            score = best[i] + lps[k]
            if score > best[j]:
                best[j] = score
                back[j] = (i, k)
    path = []
    j = unit.n
    while j > 0:
        i, k = back[j]
        path.append((i, k))
        j = i
    path.reverse()
    return best[unit.n], path


def _units_from_strings(strings: Counter, vocab: Vocab) -> list[_Unit]:
    return [_Unit(s, vocab._index, vocab.max_piece_len, float(w))
            for s, w in sorted(strings.items()) if s]


def _scores(vocab: Vocab) -> list[float]:
    # index -1 addresses the [UNK] fallback score
    return list(vocab._log_probs) + [vocab.unk_log_prob]


def _corpus_strings(corpus: Iterable[str], vocab: Vocab) -> Counter:
    return Counter(vocab.normalize(s) for s in corpus)


# -- EM -----------------------------------------------------------------------

def _e_step_units(units: list[_Unit], lps: list[float], num_pieces: int) -> tuple[np.ndarray, float]:
    counts = [0.0] * (num_pieces + 1)
    total = 0.0
    for u in units:
        alpha = _forward(u, lps)
        beta = _backward(u, lps)
        z = alpha[u.n]
        total += u.weight * z
        for j in range(1, u.n + 1):
            bj = beta[j]
            for i, k in u.ends[j]:
                counts[k] += u.weight * math.exp(alpha[i] + lps[k] + bj - z)
    return np.array(counts[:num_pieces], dtype=np.float64), total


def e_step(corpus: Iterable[str], vocab: Vocab, *, normalized: bool = False) -> tuple[np.ndarray, float]:
    """Expected piece usage under the lattice posterior, and total log-likelihood.

    Counts are aligned with ``vocab.pieces``; [UNK] fallback usage is not
    reported.  Empty sentences contribute nothing.  With ``normalized`` the
    sentences are taken verbatim (no word markers are inserted).
    """
    strings = Counter(corpus) if normalized else _corpus_strings(corpus, vocab)
    units = _units_from_strings(strings, vocab)
    return _e_step_units(units, _scores(vocab), len(vocab.pieces))


def m_step(expected_counts) -> np.ndarray:
    """Maximum-likelihood log-probabilities; zero counts map to -inf."""
    counts = np.asarray(expected_counts, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ValueError("expected_counts must be a finite, non-negative vector")
    total = math.fsum(counts)
    if total <= 0:
        raise ValueError("m_step needs at least one positive count")
    with np.errstate(divide="ignore"):
        return np.log(counts / total)


def _normalized(pieces: list[tuple[str, float]]) -> list[tuple[str, float]]:
    z = _lse([lp for _, lp in pieces])
    return [(p, lp - z) for p, lp in pieces]


# -- seeding ------------------------------------------------------------------

def _split_words(s: str, marker: str) -> list[str]:
    return [w for w in re.split(f"(?={re.escape(marker)})", s) if w]


def _seed_from_words(words: Counter, max_seed: int, max_piece_len: int) -> list[tuple[str, int]]:
    chars: Counter = Counter()
    subs: Counter = Counter()
    for w, c in words.items():
        n = len(w)
        for i in range(n):
            chars[w[i]] += c
            for j in range(i + 2, min(n, i + max_piece_len) + 1):
                subs[w[i:j]] += c
    if max_seed < len(chars):
        raise ValueError(f"max_seed={max_seed} is smaller than the {len(chars)} distinct characters")
    ranked = sorted(subs.items(), key=lambda kv: (-kv[1], kv[0]))[: max_seed - len(chars)]
    return sorted(chars.items()) + ranked


def seed_vocab(corpus: Iterable[str], max_seed: int = 1_000_000, max_piece_len: int = 16,
               word_marker: str = WORD_MARKER, normalization: Optional[str] = "NFC") -> list[tuple[str, int]]:
    """Candidate pieces with raw counts: every character, then the most
    frequent substrings of length 2..max_piece_len found within words."""
    max_seed = check_positive_int(max_seed, "max_seed")
    max_piece_len = check_positive_int(max_piece_len, "max_piece_len")
    words: Counter = Counter()
    for sentence in corpus:
        words.update(_split_words(normalize(sentence, word_marker, normalization), word_marker))
    if not words:
        raise ValueError("cannot seed a vocabulary from an empty corpus")
    return _seed_from_words(words, max_seed, max_piece_len)


def _seed_log_probs(candidates: list[tuple[str, int]]) -> list[tuple[str, float]]:
    total = math.fsum(c for _, c in candidates)
    return [(p, math.log(c / total)) for p, c in candidates]


# -- pruning ------------------------------------------------------------------

def _prune_core(pieces: list[str], lps: list[float], units: list[_Unit], keep: int) -> list[int]:
    """Indices of the pieces that survive; see :func:`prune`."""
    scores = lps + [min(lps, default=0.0) - 10.0]
    usage = [0.0] * len(pieces)
    users: dict[int, list[int]] = {}
    base = []
    for ui, u in enumerate(units):
        score, path = _viterbi(u, scores)
        base.append(score)
        for _, k in path:
            if k >= 0:
                usage[k] += u.weight
        for k in {k for _, k in path if k >= 0}:
            users.setdefault(k, []).append(ui)
    multi = [k for k, p in enumerate(pieces) if len(p) > 1]
    loss = {k: sum(units[ui].weight * (base[ui] - _viterbi(units[ui], scores, exclude=k)[0])
                   for ui in users.get(k, ()))
            for k in multi}
    ranked = sorted(multi, key=lambda k: (-loss[k], -usage[k], pieces[k]))
    dropped = set(ranked[keep:])
    return [k for k in range(len(pieces)) if k not in dropped]


def prune(vocab: Vocab, corpus: Iterable[str], shrink: float = 0.75,
          protected: Iterable[str] = (), min_keep: int = 0) -> Vocab:
    """Drop the multi-character pieces whose removal costs the least.

    The cost of a piece is the drop in total Viterbi log-likelihood of the
    corpus when that piece alone is withdrawn.  ``floor(shrink * n)`` of the n
    multi-character pieces are kept (at least ``min_keep``); ties go to the
    more used piece, then the lexicographically smaller one.  Single-character
    pieces are never removed.  Surviving probabilities are renormalized.
    """
    shrink = check_fraction(shrink, "shrink", high_open=False)
    missing = [ch for ch in protected if vocab.piece_to_id(ch) == UNK_ID]
    if missing:
        raise ValueError(f"protected characters without a piece: {missing[:5]}")
    n_multi = sum(len(p) > 1 for p, _ in vocab.pieces)
    keep = max(min_keep, math.floor(shrink * n_multi + 1e-9))
    if keep >= n_multi:
        return vocab
    units = _units_from_strings(_corpus_strings(corpus, vocab), vocab)
    pieces = [p for p, _ in vocab.pieces]
    kept = _prune_core(pieces, list(vocab._log_probs), units, keep)
    return vocab.replace_log_probs(_normalized([vocab.pieces[k] for k in kept]))


# -- training -----------------------------------------------------------------

def protected_characters(char_counts: Counter, coverage: float) -> list[str]:
    """Smallest frequency-ranked character set covering ``coverage`` of the mass."""
    total = sum(char_counts.values())
    chosen, mass = [], 0
    for ch, c in sorted(char_counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if mass >= coverage * total * (1 - 1e-12):
            break
        chosen.append(ch)
        mass += c
    return chosen


def _runs(s: str, keep: set) -> list[str]:
    out, cur = [], []
    for ch in s:
        if ch in keep:
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


@dataclass
class TrainingTrace:
    loglik: list[float] = field(default_factory=list)   # one entry per EM iteration
    sizes: list[int] = field(default_factory=list)      # vocab size after each round


def train(corpus: Iterable[str], target_size: int = DEFAULT_TARGET_SIZE, em_iters_per_round: int = 2,
          shrink: float = 0.75, coverage: float = 0.9995, max_piece_len: int = 16,
          max_seed: int = 1_000_000, word_marker: str = WORD_MARKER,
          normalization: Optional[str] = "NFC", boundary_chars: Sequence[str] = (TSHEG,),
          trace: Optional[TrainingTrace] = None) -> Vocab:
    """Fit a unigram vocabulary of at most ``target_size`` entries (specials included).

    Characters outside the smallest set covering ``coverage`` of the corpus
    character mass are left to [UNK]; the text between them is what EM sees.
    """
    target_size = check_positive_int(target_size, "target_size")
    em_iters_per_round = check_positive_int(em_iters_per_round, "em_iters_per_round")
    shrink = check_fraction(shrink, "shrink")
    coverage = check_fraction(coverage, "coverage", high_open=False)
    trace = trace if trace is not None else TrainingTrace()

    sentences = [normalize(s, word_marker, normalization) for s in corpus]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    char_counts = Counter(ch for s in sentences for ch in s)
    protected = protected_characters(char_counts, coverage)
    if target_size < len(protected) + NUM_SPECIAL:
        raise ValueError(f"target_size={target_size} is below the floor of {len(protected)} "
                         f"characters + {NUM_SPECIAL} special tokens")

    keep = set(protected)
    words: Counter = Counter()
    for s in sentences:
        for run in _runs(s, keep):
            words.update(_split_words(run, word_marker))

    seeded = _seed_log_probs(_seed_from_words(words, max(max_seed, len(keep)), max_piece_len))
    pieces = [p for p, _ in seeded]
    lps = [lp for _, lp in seeded]
    desired_multi = target_size - NUM_SPECIAL - len(keep)

    def lattices():
        index = {p: k for k, p in enumerate(pieces)}
        max_len = max(len(p) for p in pieces)
        return [_Unit(w, index, max_len, float(c)) for w, c in sorted(words.items())]

    while True:
        units = lattices()
        for _ in range(em_iters_per_round):
            counts, ll = _e_step_units(units, lps + [0.0], len(pieces))
            trace.loglik.append(ll)
            new = m_step(counts)
            if np.all(np.isfinite(new)):
                lps = new.tolist()
            else:
                # expected usage underflowed to zero: drop such multi-character
                # pieces, keep protected characters at a floor score
                floor = float(np.min(new[np.isfinite(new)])) - 10.0
                alive = [k for k in range(len(pieces)) if np.isfinite(new[k]) or len(pieces[k]) == 1]
                pieces = [pieces[k] for k in alive]
                lps = [float(new[k]) if np.isfinite(new[k]) else floor for k in alive]
                z = _lse(lps)
                lps = [lp - z for lp in lps]
                units = lattices()
        trace.sizes.append(len(pieces) + NUM_SPECIAL)
        n_multi = len(pieces) - len(keep)
        if n_multi <= desired_multi:
            break
        kept = _prune_core(pieces, lps, units, max(desired_multi, math.floor(shrink * n_multi)))
        pieces = [pieces[k] for k in kept]
        z = _lse([lps[k] for k in kept])
        lps = [lps[k] - z for k in kept]

    vocab = Vocab(zip(pieces, lps), word_marker=word_marker, boundary_chars=boundary_chars,
                  normalization=normalization)
    vocab.meta.update({
        "coverage": coverage,
        "protected_characters": len(keep),
        "character_coverage": character_coverage(sentences, vocab, normalized=True),
        "training": {
            "target_size": target_size, "em_iters_per_round": em_iters_per_round,
            "shrink": shrink, "max_piece_len": max_piece_len, "max_seed": max_seed,
        },
    })
    return vocab


def character_coverage(corpus: Iterable[str], vocab: Vocab, *, normalized: bool = False) -> float:
    """Fraction of corpus character tokens that occur in some vocab piece."""
    chars = vocab.characters
    total = covered = 0
    for s in corpus:
        s = s if normalized else vocab.normalize(s)
        total += len(s)
        covered += sum(ch in chars for ch in s)
    return covered / total if total else 1.0


# -- encoding -----------------------------------------------------------------

@dataclass(frozen=True)
class TokenizedSequence:
    ids: tuple[int, ...]
    pieces: tuple[str, ...]
    word_start: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def __post_init__(self):
        if not len(self.ids) == len(self.pieces) == len(self.word_start):
            raise ValueError("ids, pieces and word_start must have equal length")


def _sequence(s: str, path: list[tuple[int, int]], vocab: Vocab) -> TokenizedSequence:
    ids, pieces, starts = [], [], []
    marker, bounds = vocab.word_marker, vocab.boundary_chars
    for i, k in path:
        if k < 0:
            ids.append(UNK_ID)
            pieces.append(SPECIAL_TOKENS[UNK_ID])
        else:
            ids.append(k + NUM_SPECIAL)
            pieces.append(vocab.pieces[k][0])
        starts.append(s[i] == marker or i == 0 or s[i - 1] in bounds)
    return TokenizedSequence(tuple(ids), tuple(pieces), tuple(starts))


def encode_viterbi(text: str, vocab: Vocab, *, normalized: bool = False) -> TokenizedSequence:
    """Most probable segmentation of ``text``.

    A piece starts a word when it carries the word marker or follows one of
    ``vocab.boundary_chars`` (the tsheg by default).
    """
    s = text if normalized else vocab.normalize(text)
    unit = _Unit(s, vocab._index, vocab.max_piece_len, 1.0)
    _, path = _viterbi(unit, _scores(vocab))
    return _sequence(s, path, vocab)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def encode_sample(text: str, vocab: Vocab, alpha: float = 1.0, rng=None, *,
                  normalized: bool = False) -> TokenizedSequence:
    """Draw a segmentation with probability proportional to P(path) ** alpha.

    Forward filtering over the lattice, then sampling edges backwards from the
    final node.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = _as_rng(rng)
    s = text if normalized else vocab.normalize(text)
    unit = _Unit(s, vocab._index, vocab.max_piece_len, 1.0)
    lps = [alpha * lp for lp in _scores(vocab)]
    fwd = _forward(unit, lps)
    path = []
    j = unit.n
    while j > 0:
        cands = unit.ends[j]
        w = np.array([math.exp(fwd[i] + lps[k] - fwd[j]) for i, k in cands])
        pick = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
        i, k = cands[min(pick, len(cands) - 1)]
        path.append((i, k))
        j = i
    path.reverse()
    return _sequence(s, path, vocab)


def decode(ids: Iterable[int], vocab: Vocab, unk_placeholder: Optional[str] = None) -> str:
    """Inverse of encoding; specials other than [UNK] are dropped."""
    unk = vocab.unk_placeholder if unk_placeholder is None else unk_placeholder
    parts = []
    for i in ids:
        i = int(i)
        piece = vocab.id_to_piece(i)
        if i == UNK_ID:
            parts.append(unk)
        elif i >= NUM_SPECIAL:
            parts.append(piece)
    return denormalize("".join(parts), vocab.word_marker)


def path_log_prob(seq: TokenizedSequence, vocab: Vocab) -> float:
    return math.fsum(vocab.log_prob(i) for i in seq.ids)


# -- estimator ----------------------------------------------------------------

class UnigramTokenizer(TransformerMixin, BaseEstimator):
    """Unigram-LM subword tokenizer.

    ``fit`` learns the vocabulary from raw sentences, ``transform`` returns one
    :class:`TokenizedSequence` per input text.  With ``sample_alpha`` set,
    ``transform`` draws segmentations instead of taking the Viterbi path.
    """

    def __init__(self, target_size: int = DEFAULT_TARGET_SIZE, coverage: float = 0.9995,
                 shrink: float = 0.75, em_iters_per_round: int = 2, max_piece_len: int = 16,
                 max_seed: int = 1_000_000, word_marker: str = WORD_MARKER,
                 normalization: Optional[str] = "NFC", sample_alpha: Optional[float] = None,
                 random_state=None):
        self.target_size = target_size
        self.coverage = coverage
        self.shrink = shrink
        self.em_iters_per_round = em_iters_per_round
        self.max_piece_len = max_piece_len
        self.max_seed = max_seed
        self.word_marker = word_marker
        self.normalization = normalization
        self.sample_alpha = sample_alpha
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_text_list(X)
        self.trace_ = TrainingTrace()
        self.vocab_ = train(X, self.target_size, self.em_iters_per_round, self.shrink, self.coverage,
                            self.max_piece_len, self.max_seed, self.word_marker, self.normalization,
                            trace=self.trace_)
        return self

    @classmethod
    def from_vocab(cls, vocab: Vocab, **params) -> "UnigramTokenizer":
        tok = cls(word_marker=vocab.word_marker, normalization=vocab.normalization, **params)
        tok.vocab_ = vocab
        return tok

    @classmethod
    def load(cls, path: Union[str, Path], **params) -> "UnigramTokenizer":
        return cls.from_vocab(Vocab.load(path), **params)

    def save(self, path: Union[str, Path]) -> None:
        check_is_fitted(self, "vocab_")
        self.vocab_.save(path)

    def encode(self, text: str, rng=None) -> TokenizedSequence:
        check_is_fitted(self, "vocab_")
        if self.sample_alpha is None:
            return encode_viterbi(text, self.vocab_)
        return encode_sample(text, self.vocab_, self.sample_alpha,
                             rng if rng is not None else self.random_state)

    def transform(self, X) -> list[TokenizedSequence]:
        check_is_fitted(self, "vocab_")
        X = check_text_list(X)
        rng = _as_rng(self.random_state) if self.sample_alpha is not None else None
        return [self.encode(x, rng) for x in X]

    def decode(self, ids: Iterable[int]) -> str:
        check_is_fitted(self, "vocab_")
        return decode(ids, self.vocab_)

    def inverse_transform(self, X) -> list[str]:
        return [self.decode(seq.ids if isinstance(seq, TokenizedSequence) else seq) for seq in X]
