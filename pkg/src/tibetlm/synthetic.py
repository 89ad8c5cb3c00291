"""Deterministic toy data: Tibetan-script corpus, labelled texts, QA records
and a copy task. Used by the bundled sample files and the test suite."""
from __future__ import annotations

import numpy as np

from .segmenter import SHAD, TSHEG

# precomposed letters that NFC decomposes are left out
_ROOTS = [chr(c) for c in range(0x0F40, 0x0F6A) if c not in (0x0F43, 0x0F48, 0x0F4D, 0x0F52, 0x0F57, 0x0F5C, 0x0F69)]
_VOWELS = ["", "", "ི", "ུ", "ེ", "ོ"]
_SUFFIXES = ["", "", "", "ན", "ས", "ག", "ད", "བ", "མ", "ར", "ལ", "ང"]


def _lexicon(rng: np.random.Generator, size: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n = int(rng.choice([1, 2, 2, 3]))
        syls = [rng.choice(_ROOTS) + rng.choice(_VOWELS) + rng.choice(_SUFFIXES) for _ in range(n)]
        w = TSHEG.join(str(x) for x in syls)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def synthetic_sentences(num_sentences: int = 50, seed: int = 0, lexicon_size: int = 120,
                        length: tuple = (8, 14)) -> list[str]:
    """Sentences of Zipf-distributed words, tsheg-joined, closed with a shad."""
    rng = np.random.default_rng(seed)
    lex = _lexicon(rng, lexicon_size)
    p = _zipf(len(lex))
    out = []
    for _ in range(num_sentences):
        k = int(rng.integers(length[0], length[1] + 1))
        out.append(TSHEG.join(str(w) for w in rng.choice(lex, size=k, p=p)) + SHAD)
    return out


def synthetic_documents(num_sentences: int = 50, sentences_per_doc: int = 10, seed: int = 0) -> list[dict]:
    """Raw-document records ``{source_id, text}`` grouping consecutive sentences."""
    sents = synthetic_sentences(num_sentences, seed)
    return [{"source_id": f"doc{i // sentences_per_doc:03d}", "text": " ".join(sents[i:i + sentences_per_doc])}
            for i in range(0, len(sents), sentences_per_doc)]


def synthetic_labelled(num_per_class: int = 20, num_classes: int = 3, seed: int = 0,
                       length: int = 8) -> list[tuple[str, str]]:
    """``(label, text)`` pairs; each class draws mostly from its own word pool."""
    rng = np.random.default_rng(seed)
    lex = _lexicon(rng, 12 * num_classes + 12)
    shared = lex[-12:]
    out = []
    for c in range(num_classes):
        own = lex[12 * c:12 * (c + 1)]
        for _ in range(num_per_class):
            words = [rng.choice(own) if rng.random() < 0.7 else rng.choice(shared) for _ in range(length)]
            out.append((f"class{c}", TSHEG.join(str(w) for w in words) + SHAD))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


_QUESTION_WORDS = ["གང་", "སུ་", "ག་རེ་"]
_QUESTION_END = "ཡིན་ནམ"


def synthetic_qa(num_examples: int = 20, seed: int = 0) -> list[dict]:
    """QA records ``{id, context, question, answer, answer_start}``.

    The question repeats the two words before the answer and a question
    word picked by the answer's first letter.
    """
    rng = np.random.default_rng(seed)
    lex = _lexicon(rng, 80)
    out = []
    for n in range(num_examples):
        words = [str(w) for w in rng.choice(lex, size=int(rng.integers(7, 11)))]
        a = int(rng.integers(2, len(words)))
        answer = words[a]
        context = TSHEG.join(words) + SHAD
        start = len(TSHEG.join(words[:a]) + TSHEG)
        qword = _QUESTION_WORDS[ord(answer[0]) % len(_QUESTION_WORDS)]
        question = TSHEG.join([words[a - 2], words[a - 1]]) + TSHEG + qword + _QUESTION_END + SHAD
        out.append({"id": f"qa{n:03d}", "context": context, "question": question, "answer": answer,
                    "answer_start": start})
    return out


def copy_task(num_examples: int, seed: int = 0, frame_size: int = 12, content_size: int = 200):
    """Paragraphs of frame tokens with a 1-3 token span of content tokens.

    Returns ``(examples, frame_tokens)``; the question is the span verbatim
    and content tokens never appear in the frame vocabulary.
    """
    from .qg import QGExample
    rng = np.random.default_rng(seed)
    frame = [f"w{i}" for i in range(frame_size)]
    content = [f"c{i}" for i in range(content_size)]
    out = []
    for i in range(num_examples):
        L = int(rng.integers(6, 10))
        para = [str(t) for t in rng.choice(frame, size=L)]
        s = int(rng.integers(0, L - 1))
        e = min(s + int(rng.integers(1, 4)) - 1, L - 1)
        for j in range(s, e + 1):
            para[j] = str(rng.choice(content))
        out.append(QGExample(tuple(para), (s, e), tuple(para[s:e + 1]), f"copy{i}"))
    return out, frame


SMALL_PIPELINE = {
    "seed": 0,
    "threads": 1,
    "tokenizer": {"target_size": 300},
    "pretrain_data": {"max_seq_len": 64},
    "encoder": {"hidden_size": 32, "num_hidden_layers": 2, "num_attention_heads": 4, "intermediate_size": 64,
                "max_position_embeddings": 64},
    "optimizer": {"learning_rate": 5e-3, "num_steps": 30, "batch_size": 8},
    "classify": {"learning_rate": 2e-3, "num_steps": 150, "eval_every": 25, "batch_size": 8, "dropout": 0.0},
    "qg": {"hidden_size": 32, "embedding_size": 16, "batch_size": 10, "dropout": 0.0, "optimizer": "adam",
           "learning_rate": 1e-2, "num_epochs": 30, "vocab_size": 2000},
}


def write_sample_data(directory, seed: int = 0) -> None:
    """Write the bundled sample corpus, classification TSV, QA JSON and small config."""
    import json
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dump = lambda obj: json.dumps(obj, ensure_ascii=False, sort_keys=True)
    docs = synthetic_documents(50, 10, seed)
    (d / "corpus.jsonl").write_text("".join(dump(x) + "\n" for x in docs), encoding="utf-8")
    rows = synthetic_labelled(20, 3, seed)
    (d / "tncc.tsv").write_text("".join(f"{lab}\t{text}\n" for lab, text in rows), encoding="utf-8")
    (d / "qa.json").write_text(json.dumps(synthetic_qa(40, seed), ensure_ascii=False, indent=1) + "\n",
                               encoding="utf-8")
    (d / "pipeline_small.json").write_text(json.dumps(SMALL_PIPELINE, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


if __name__ == "__main__":
    import sys
    write_sample_data(sys.argv[1] if len(sys.argv) > 1 else "data")
