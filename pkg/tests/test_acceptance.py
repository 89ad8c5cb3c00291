"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""
import filecmp
import json
import math
import random
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from tibetlm.encoder import (EncoderConfig, OptimizerConfig, batch_loss, grad_check, init_params, parameter_count,
                             pretrain, tiny_config)
from tibetlm.metrics import bleu, lcs_length, macro_metrics, rouge_l
from tibetlm.pretrain_data import (IGNORE_INDEX, MaskAction, SentencePairDraft, apply_whole_word_mask,
                                   build_nsp_pairs, build_pretraining_examples)
from tibetlm.qg import QG_SPECIALS, QGConfig, QGVocab, bleu_on, generate, load_tibetan_qa, train_qg
from tibetlm.synthetic import copy_task, synthetic_qa
from tibetlm.unigram import (NUM_SPECIAL, TokenizedSequence, TrainingTrace, Vocab, character_coverage, e_step,
                             encode_viterbi, path_log_prob, train)

from oracles import brute_best, brute_expected_counts, lcs_brute, ngram_counts, per_class_metrics

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number, ok, what, measured):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {what} | {measured}")
        assert ok, f"criterion {number} failed: {measured}"
    return emit


# 1 -------------------------------------------------------------------------------

def _toy_instance(rng):
    alphabet = "abcd"
    pieces = set(alphabet[:-1]) if rng.random() < 0.3 else set(alphabet)
    while len(pieces) < 8:
        pieces.add("".join(rng.choice(alphabet) for _ in range(rng.randint(2, 4))))
    vocab = Vocab([(p, math.log(rng.uniform(0.05, 1.0))) for p in sorted(pieces)])
    text = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12)))
    return vocab, text


def test_01_tokenizer_oracle_equivalence(report):
    rng = random.Random(2024)
    start = time.perf_counter()
    worst, n = 0.0, 250
    for _ in range(n):
        vocab, text = _toy_instance(rng)
        pieces = {p: lp for p, lp in vocab.pieces}
        counts, ll = e_step([text], vocab, normalized=True)
        ref_counts, ref_ll = brute_expected_counts(text, pieces, vocab.unk_log_prob)
        worst = max(worst, abs(ll - ref_ll))
        for (piece, _), c in zip(vocab.pieces, counts):
            worst = max(worst, abs(c - ref_counts.get(piece, 0.0)))
        seq = encode_viterbi(text, vocab, normalized=True)
        worst = max(worst, abs(path_log_prob(seq, vocab) - brute_best(text, pieces, vocab.unk_log_prob)))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed < 60, "Viterbi + E-step == enumeration on 250 instances",
           f"max abs diff {worst:.2e}, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------------

def _synthetic_corpus(n, seed):
    from tibetlm.synthetic import synthetic_sentences
    return synthetic_sentences(n, seed)


def test_02_em_monotonicity(report):
    corpus = _synthetic_corpus(1000, 0)
    start = time.perf_counter()
    # a target above the seed size means one round of 10 EM iterations and no pruning
    trace = TrainingTrace()
    train(corpus, target_size=10**6, em_iters_per_round=10, max_seed=3000, max_piece_len=8, trace=trace)
    lls = trace.loglik
    worst_drop = max(a - b for a, b in zip(lls, lls[1:]))
    elapsed = time.perf_counter() - start
    ok = len(lls) == 10 and worst_drop <= 1e-9 and elapsed < 120
    report(2, ok, "10 EM rounds on 1,000 sentences never lose likelihood",
           f"{len(lls)} iterations, largest decrease {max(worst_drop, 0.0):.2e}, "
           f"ll {lls[0]:.1f} -> {lls[-1]:.1f}, {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------------

def test_03_coverage_contract(report):
    rng = np.random.default_rng(3)
    # 120 characters with a Zipf(1.3) distribution: a long tail of rare ones
    chars = [chr(c) for c in range(0x4E00, 0x4E00 + 120)]
    w = 1.0 / np.arange(1, len(chars) + 1) ** 1.3
    w /= w.sum()
    corpus = []
    for _ in range(800):
        words = ["".join(rng.choice(chars, size=int(rng.integers(1, 5)), p=w)) for _ in range(int(rng.integers(3, 8)))]
        corpus.append(" ".join(words))
    counts = Counter(ch for s in corpus for ch in s)
    vocab = train(corpus, target_size=400, coverage=0.9995, max_piece_len=6)
    cov = character_coverage(corpus, vocab)
    rare = sum(1 for c in chars if counts[c] <= 2)
    report(3, cov >= 0.9995, "coverage 0.9995 on a long-tail corpus",
           f"character_coverage {cov:.6f}, {len(counts)} distinct chars, {rare} seen at most twice")


# 4 -------------------------------------------------------------------------------

def _random_seq(rng, n, p_start, vocab_size=50):
    ids = tuple(rng.integers(NUM_SPECIAL, vocab_size, size=n).tolist())
    starts = (True,) + tuple((rng.random(n - 1) < p_start).tolist())
    return TokenizedSequence(ids, tuple(map(str, ids)), starts)


def test_04_masking_statistics(report):
    rng = np.random.default_rng(4)
    content = selected = violations = 0
    actions = Counter()
    while content < 100_000:
        pair = SentencePairDraft(_random_seq(rng, int(rng.integers(60, 250)), 0.6),
                                 _random_seq(rng, int(rng.integers(60, 250)), 0.6), True)
        ex, taken = apply_whole_word_mask(pair, 50, rng, return_actions=True)
        content += len(pair.tokens_a) + len(pair.tokens_b)
        labelled = {i for i, lab in enumerate(ex.mlm_labels) if lab != IGNORE_INDEX}
        selected += len(labelled)
        starts = [None] + list(pair.tokens_a.word_start) + [None] + list(pair.tokens_b.word_start)
        for span, _ in taken:
            lo, hi = min(span), max(span)
            # a span must be a full word: it starts a word and the next token starts another
            whole = (set(span) == set(range(lo, hi + 1)) and starts[lo]
                     and (hi + 1 >= len(starts) or starts[hi + 1] in (None, True)))
            violations += not whole
        violations += labelled != set().union(*(set(s) for s, _ in taken))
        actions.update(a for _, a in taken)
    frac = selected / content
    n = sum(actions.values())
    split = [actions[MaskAction.MASK] / n, actions[MaskAction.RANDOM] / n, actions[MaskAction.KEEP] / n]
    ok = (0.14 <= frac <= 0.16 and all(abs(s - t) <= 0.02 for s, t in zip(split, (0.8, 0.1, 0.1)))
          and violations == 0)
    report(4, ok, "whole-word masking rate, action split, atomicity",
           f"{content} tokens, selected {frac:.4f}, split {[round(s, 4) for s in split]}, violations {violations}")


# 5 -------------------------------------------------------------------------------

def test_05_nsp_balance(report):
    rng = np.random.default_rng(5)
    docs = [[_random_seq(rng, 3, 0.5) for _ in range(101)] for _ in range(100)]
    pairs = build_nsp_pairs(docs, 11)
    frac = sum(p.is_next for p in pairs) / len(pairs)
    report(5, len(pairs) == 10_000 and 0.48 <= frac <= 0.52, "next-sentence label balance",
           f"{len(pairs)} pairs, is-next fraction {frac:.4f}")


# 6 -------------------------------------------------------------------------------

def test_06_gradient_check(report):
    start = time.perf_counter()
    res = grad_check(tiny_config(), seed=0)
    elapsed = time.perf_counter() - start
    report(6, res.max_relative_error < 1e-4 and elapsed < 120, "float64 finite-difference gradient check",
           f"max relative error {res.max_relative_error:.2e} over {res.num_coordinates} coordinates, {elapsed:.1f}s")


# 7 -------------------------------------------------------------------------------

def _fifty_sentence_examples(V=40, seed=0):
    """Fifty synthetic sentences packed into masked pretraining examples."""
    rng = np.random.default_rng(seed)
    docs = [[_random_seq(rng, int(rng.integers(4, 9)), 0.6, V) for _ in range(5)] for _ in range(10)]
    return build_pretraining_examples(docs, V, seed, max_seq_len=24)


def test_07_memorization(report):
    cfg = tiny_config(vocab_size=40, hidden_size=32, num_attention_heads=4, intermediate_size=64,
                      max_position_embeddings=24, initializer_range=0.02)
    exs = _fifty_sentence_examples()
    P = init_params(cfg, 0)
    Q, _ = pretrain(P, cfg, exs, OptimizerConfig(learning_rate=1e-2, num_steps=200, batch_size=16,
                                                 warmup_fraction=0.05))
    with torch.no_grad():
        before, after = batch_loss(P, cfg, exs).mlm.item(), batch_loss(Q, cfg, exs).mlm.item()

    qa = synthetic_qa(20, 0)
    path = Path(__file__).parent / ".qa_acceptance.json"
    path.write_text(json.dumps(qa, ensure_ascii=False), encoding="utf-8")
    try:
        examples = load_tibetan_qa(path)
    finally:
        path.unlink()
    model = train_qg(examples, QGConfig(hidden_size=32, embedding_size=16, batch_size=10, dropout=0.0,
                                        learning_rate=1e-2, optimizer="adam", vocab_size=1000, num_epochs=150))
    b1 = bleu_on(model, examples, max_n=1)
    ok = after < 0.1 * before and b1 > 0.9
    report(7, ok, "encoder MLM memorization and QG training BLEU-1",
           f"MLM loss {before:.3f} -> {after:.4f} (ratio {after / before:.4f}) on {len(exs)} pairs from 50 sentences; "
           f"QG BLEU-1 {b1:.3f}")


# 8 -------------------------------------------------------------------------------

def _copy_exact_match(copy):
    train_set, frame = copy_task(200, 0)
    test_set, _ = copy_task(100, 1)
    vocab = QGVocab(list(QG_SPECIALS) + frame)
    cfg = QGConfig(hidden_size=32, embedding_size=16, batch_size=16, dropout=0.0, learning_rate=1e-2,
                   optimizer="adam", num_epochs=15, vocab_size=len(vocab), copy=copy)
    model = train_qg(train_set, cfg, vocab=vocab)
    return float(np.mean([generate(model, e.paragraph, e.answer_span) == list(e.question) for e in test_set]))


def test_08_copy_capability(report):
    with_copy, without = _copy_exact_match(True), _copy_exact_match(False)
    report(8, with_copy > 0.9 and without < 0.1, "copy task exact match, copy on vs off",
           f"copy {with_copy:.3f}, no-copy {without:.3f}")


# 9 -------------------------------------------------------------------------------

def test_09_metric_oracles(report):
    rng = np.random.default_rng(9)
    macro_worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        cm = rng.integers(0, 20, size=(k, k))
        if rng.random() < 0.2:
            cm[:, int(rng.integers(k))] = 0
        if cm.sum() == 0:
            cm[0, 0] = 1
        got = macro_metrics(cm)
        ref = per_class_metrics(cm.tolist())
        macro_worst = max(macro_worst, *(abs(a - b) for a, b in
                                         zip((got.accuracy, got.macro_precision, got.macro_recall, got.macro_f1), ref)))
    lcs_bad = 0
    for _ in range(300):
        a = rng.integers(0, 4, size=int(rng.integers(0, 11))).tolist()
        b = rng.integers(0, 4, size=int(rng.integers(0, 11))).tolist()
        lcs_bad += lcs_length(a, b) != lcs_brute(a, b)
    c, r = "a b c".split(), "a b c d".split()
    # hand value, counted independently: p1 = 3/3, p2 = 2/2, BP = exp(1 - 4/3)
    p1 = sum((ngram_counts(c, 1) & ngram_counts(r, 1)).values()) / 3
    p2 = sum((ngram_counts(c, 2) & ngram_counts(r, 2)).values()) / 2
    hand = math.exp(1 - 4 / 3) * math.sqrt(p1 * p2)
    bleu_err = abs(bleu(c, [r], max_n=2) - hand)
    ident = [bleu(x, [x]) for x in (list("abcdef"), list("abcd"))] + [rouge_l(list("xyz"), list("xyz"), b)
                                                                     for b in (0.5, 1.2, 3.0)]
    ok = macro_worst <= 1e-12 and lcs_bad == 0 and bleu_err <= 1e-9 and all(v == 1.0 for v in ident)
    report(9, ok, "macro metrics, LCS, BLEU hand example, identity",
           f"macro max diff {macro_worst:.1e}, LCS mismatches {lcs_bad}/300, BLEU-2 error {bleu_err:.1e}, "
           f"identity scores {sorted(set(ident))}")


# 10 ------------------------------------------------------------------------------

def test_10_parameter_count(report):
    counts = parameter_count(EncoderConfig())
    total = counts["total"]
    rel = abs(total - 110e6) / 110e6
    report(10, rel <= 0.02 and counts["mlm_decoder_tied"], "default encoder size vs 110M with tied MLM decoder",
           f"total {total:,} ({rel:.2%} from 110M), encoder+pooler {counts['encoder_with_pooler']:,}")


# 11 ------------------------------------------------------------------------------

def _pipeline(out: Path) -> None:
    subprocess.run([sys.executable, "-m", "tibetlm.cli", "--threads", "1", "-q", "pipeline", "-o", str(out)],
                   check=True, capture_output=True, text=True)


def test_11_reproducibility(report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    start = time.perf_counter()
    _pipeline(a)
    _pipeline(b)
    elapsed = time.perf_counter() - start
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    differing = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    expected = {"vocab.tsv", "examples.jsonl", "encoder.ckpt", "classify_report.json", "qg_scores.json",
                "summary.json", "generations.jsonl"}
    present = expected <= {str(f) for f in files}
    leaked = [str(f) for f in files if str(tmp_path) in (a / f).read_bytes().decode("utf-8", "ignore")]
    report(11, present and not differing and not leaked, "two --threads 1 pipeline runs are byte-identical",
           f"{len(files)} artifacts compared, differing {differing}, path leaks {leaked}, {elapsed:.1f}s")
