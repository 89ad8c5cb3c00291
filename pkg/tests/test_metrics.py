import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tibetlm.metrics import (
    ConfusionMatrix, bleu, brevity_penalty, corpus_bleu, corpus_scores, lcs_length, macro_metrics,
    rouge_l, sentence_scores,
)

from oracles import lcs_brute, ngram_counts, per_class_metrics


def test_macro_examples():
    assert tuple(macro_metrics(np.eye(3, dtype=int) * 4)) == (1.0, 1.0, 1.0, 1.0)
    assert tuple(macro_metrics([[1, 1], [1, 1]])) == (0.5, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        macro_metrics(np.zeros((3, 3), dtype=int))


def test_macro_random_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cm = rng.integers(0, 6, size=(4, 4))
        if cm.sum() == 0:
            continue
        assert tuple(macro_metrics(cm)) == pytest.approx(per_class_metrics(cm.tolist()), abs=1e-12)


def test_zero_predicted_class_has_zero_precision():
    rep = macro_metrics([[2, 0], [1, 0]])
    assert rep.per_class["1"]["precision"] == 0.0
    assert rep.per_class["1"]["f1"] == 0.0


def test_confusion_from_predictions():
    cm = ConfusionMatrix.from_predictions(["a", "b", "b"], ["a", "a", "b"], labels=["a", "b"])
    assert cm.counts.tolist() == [[1, 0], [1, 1]]
    assert cm.total == 3
    with pytest.raises(ValueError):
        ConfusionMatrix.from_predictions(["a"], ["z"], labels=["a", "b"])


def brute_bleu(cand, refs, max_n):
    """Direct transcription: clipped precision per order, uniform weights, standard BP."""
    logs = 0.0
    for n in range(1, max_n + 1):
        c = ngram_counts(cand, n)
        clip = sum(min(v, max(ngram_counts(r, n)[g] for r in refs)) for g, v in c.items())
        logs += math.log(clip / sum(c.values())) / max_n
    ref_len = min((len(r) for r in refs), key=lambda L: (abs(L - len(cand)), L))
    bp = 1.0 if len(cand) >= ref_len else math.exp(1 - ref_len / len(cand))
    return bp * math.exp(logs)


def test_bleu_hand_example():
    cand, ref = "a b c".split(), "a b c d".split()
    expected = math.exp(1 - 4 / 3)
    assert bleu(cand, [ref], max_n=2) == pytest.approx(expected, abs=1e-12)
    assert brute_bleu(cand, [ref], 2) == pytest.approx(expected, abs=1e-12)


def test_bleu_identity_and_disjoint():
    s = "ཀ ཁ ག ང ཅ".split()
    assert bleu(s, [s]) == 1.0
    assert bleu(["x", "y"], [["a", "b"]], smoothing=0) == 0.0
    assert bleu(["x", "y"], [["a", "b"]]) < 1e-3
    with pytest.raises(ValueError):
        bleu(s, [s], max_n=0)


def test_brevity_penalty_orientation():
    assert brevity_penalty(5, 4) == 1.0
    assert brevity_penalty(3, 4) == pytest.approx(math.exp(1 - 4 / 3))


def test_bleu_random_against_brute():
    rng = random.Random(5)
    for _ in range(200):
        refs = [[rng.choice("abcd") for _ in range(rng.randint(4, 9))] for _ in range(rng.randint(1, 3))]
        cand = list(refs[0])
        rng.shuffle(cand)
        cand = cand[: rng.randint(4, len(cand))]
        want = brute_bleu(cand, refs, 1)
        assert bleu(cand, refs, max_n=1) == pytest.approx(want, abs=1e-12)


def test_rouge_examples():
    s = list("abcde")
    for beta in (0.5, 1.0, 1.2, 3.0):
        assert rouge_l(s, s, beta) == 1.0
    f = (2.44 * 1 * (2 / 3)) / (1 + 1.44 * (2 / 3))
    assert rouge_l("a b c".split(), "a c".split(), 1.2) == pytest.approx(f, abs=1e-12)
    assert rouge_l(["a"], ["b"]) == 0.0


@settings(max_examples=300)
@given(st.lists(st.sampled_from("abc"), max_size=10), st.lists(st.sampled_from("abc"), max_size=10))
def test_lcs_against_enumeration(a, b):
    n = lcs_length(a, b)
    assert n == lcs_brute(a, b) == lcs_length(b, a)
    assert n <= min(len(a), len(b))


@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=12),
       st.lists(st.sampled_from("abcd"), min_size=1, max_size=12),
       st.permutations("abcd"))
def test_scores_invariant_under_renaming(c, r, perm):
    rename = dict(zip("abcd", perm))
    c2, r2 = [rename[t] for t in c], [rename[t] for t in r]
    assert bleu(c, [r]) == pytest.approx(bleu(c2, [r2]), rel=1e-12)
    assert rouge_l(c, r) == rouge_l(c2, r2)
    for v in (bleu(c, [r]), rouge_l(c, r)):
        assert 0.0 <= v <= 1.0


def test_corpus_scores():
    pair = ("ཀ ཁ ག ང".split(), ["ཀ ཁ ག ཅ ང".split()])
    single = corpus_scores([pair])
    sent = sentence_scores(*pair)
    # first three orders have matches, so smoothing does not enter
    assert single.bleu_n[:3] == pytest.approx(sent.bleu_n[:3], abs=1e-12)
    assert single.rouge_l == sent.rouge_l
    pairs = [pair, ("ཀ ཁ".split(), ["ཀ ཁ ག".split()]), ("ག ང ཅ".split(), ["ག ང ཅ".split()])]
    assert corpus_scores(pairs).bleu_n == pytest.approx(corpus_scores(pairs * 3).bleu_n, abs=1e-12)
    with pytest.raises(ValueError):
        corpus_scores([])
    ident = corpus_scores([(list("abcde"), [list("abcde")])])
    assert ident.bleu_n == [1.0] * 4 and ident.rouge_l == 1.0
