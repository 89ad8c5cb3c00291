"""Sequence classification by fine-tuning the encoder's pooled [CLS] state."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import (Batch, EncoderConfig, NonFiniteLossError, OptimizerConfig, _dropout, _kind, _schedule,
                      forward, init_params)
from .metrics import ClassificationReport, ConfusionMatrix, macro_metrics
from .unigram import CLS_ID, PAD_ID, SEP_ID, UnigramTokenizer, Vocab, encode_viterbi

TITLE_MAX_LEN = 64
DOCUMENT_MAX_LEN = 512


@dataclass(frozen=True)
class LabeledText:
    text: str
    label: str


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    dev: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        parts = (self.train, self.dev, self.test)
        if any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {parts}")


def split_dataset(items: Sequence, spec: SplitSpec = SplitSpec(), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous train/dev/test slices (test takes the remainder)."""
    items = list(items)
    if len(items) < 10:
        raise ValueError(f"need at least 10 items to split, got {len(items)}")
    order = np.random.default_rng(seed).permutation(len(items))
    n = len(items)
    n_train = int(math.floor(spec.train * n + 1e-9))
    n_dev = int(math.floor(spec.dev * n + 1e-9))
    shuffled = [items[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_dev], shuffled[n_train + n_dev:]


def load_tncc(path: Union[str, Path]) -> list[LabeledText]:
    """TSV with one ``label<TAB>text`` record per line; blank lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep or not label or not text.strip():
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
            out.append(LabeledText(text, label))
    return out


@dataclass(frozen=True)
class HeadConfig:
    """Fine-tuning settings; ``mode`` picks the truncation length."""
    mode: str = "title"
    max_len: Optional[int] = None
    dropout: float = 0.1
    learning_rate: float = 5e-5
    num_steps: int = 300
    batch_size: int = 16
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    eval_every: int = 50
    freeze_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("title", "document"):
            raise ValueError(f"mode must be 'title' or 'document', got {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.num_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("num_steps >= 0, batch_size >= 1 and eval_every >= 1 are required")

    @property
    def sequence_length(self) -> int:
        if self.max_len is not None:
            return self.max_len
        return TITLE_MAX_LEN if self.mode == "title" else DOCUMENT_MAX_LEN

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "HeadConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown head config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Classifier:
    encoder_params: "OrderedDict[str, torch.Tensor]"
    config: EncoderConfig
    head_weight: torch.Tensor
    head_bias: torch.Tensor
    labels: list
    vocab: Vocab
    head_config: HeadConfig
    dev_curve: list = field(default_factory=list)
    best_step: int = 0


def _to_ids(texts: Sequence[str], vocab: Vocab, max_len: int, vocab_size: int) -> list[list[int]]:
    out = []
    for t in texts:
        ids = list(encode_viterbi(t, vocab).ids)[: max(max_len - 2, 0)]
        if ids and max(ids) >= vocab_size:
            raise ValueError("tokenizer vocabulary is larger than the encoder's vocab_size")
        out.append([CLS_ID] + ids + [SEP_ID])
    return out


def _batch(rows: Sequence[list[int]]):
    S = max(len(r) for r in rows)
    ids = torch.tensor([r + [PAD_ID] * (S - len(r)) for r in rows], dtype=torch.long)
    mask = torch.tensor([[1] * len(r) + [0] * (S - len(r)) for r in rows], dtype=torch.long)
    return Batch(ids, torch.zeros_like(ids), mask, torch.full_like(ids, -1), torch.zeros(len(rows), dtype=torch.long))


def _logits(enc, config, w, b, rows, train_mode=False, seed=0, dropout=0.0):
    out = forward(enc, config, _batch(rows), train_mode=train_mode, seed=seed, heads=False)
    pooled = out.pooled
    if train_mode and dropout > 0:
        pooled = _dropout(pooled, dropout, torch.Generator().manual_seed(seed + 7919))
    return pooled @ w + b


def class_scores(clf: Classifier, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
    """Softmax probabilities, shape ``(len(texts), #labels)``."""
    if not len(texts):
        return np.zeros((0, len(clf.labels)))
    rows = _to_ids(texts, clf.vocab, clf.head_config.sequence_length, clf.config.vocab_size)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(rows), batch_size):
            z = _logits(clf.encoder_params, clf.config, clf.head_weight, clf.head_bias, rows[i:i + batch_size])
            chunks.append(torch.softmax(z.double(), dim=-1).numpy())
    return np.concatenate(chunks)


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties resolve to the smallest column index."""
    return np.argmax(np.asarray(scores), axis=1)


def predict(clf: Classifier, texts: Sequence[str]) -> list:
    if not len(texts):
        return []
    return [clf.labels[i] for i in argmax_lowest(class_scores(clf, texts))]


def evaluate(clf: Classifier, items: Sequence[LabeledText]) -> ClassificationReport:
    unknown = sorted({it.label for it in items} - set(clf.labels))
    if unknown:
        raise ValueError(f"labels not seen in training: {unknown}")
    if not items:
        raise ValueError("nothing to evaluate")
    pred = predict(clf, [it.text for it in items])
    return macro_metrics(ConfusionMatrix.from_predictions([it.label for it in items], pred, clf.labels))


def finetune(encoder_params: Mapping[str, torch.Tensor], config: EncoderConfig, train: Sequence[LabeledText],
             dev: Sequence[LabeledText], head_config: HeadConfig, vocab: Vocab,
             labels: Optional[Sequence[str]] = None) -> Classifier:
    """Train pooled-[CLS] -> dropout -> linear with softmax cross-entropy.

    The encoder is updated too unless ``freeze_encoder``. Dev macro-F1 is
    measured every ``eval_every`` steps and at the end; the best snapshot is
    kept (earliest on ties). Step 0 is the untrained model.
    """
    if not train:
        raise ValueError("empty training set")
    labels = sorted({it.label for it in train}) if labels is None else list(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    stray = sorted({it.label for it in list(train) + list(dev)} - set(index))
    if stray:
        raise ValueError(f"labels outside the declared set: {stray}")
    hc = head_config
    gen = torch.Generator().manual_seed(hc.seed)
    sigma = config.initializer_range / 0.87962566103423978
    w = torch.nn.init.trunc_normal_(torch.empty(config.hidden_size, len(labels), dtype=torch.float64),
                                    0.0, sigma, -2 * sigma, 2 * sigma, generator=gen).float()
    b = torch.zeros(len(labels))
    enc = OrderedDict((k, v.detach().clone().float().requires_grad_(not hc.freeze_encoder))
                      for k, v in encoder_params.items())
    w.requires_grad_(True)
    b.requires_grad_(True)

    rows = _to_ids([it.text for it in train], vocab, hc.sequence_length, config.vocab_size)
    y = torch.tensor([index[it.label] for it in train])
    clf = Classifier(enc, config, w, b, labels, vocab, hc)

    def snapshot():
        return (OrderedDict((k, v.detach().clone()) for k, v in enc.items()), w.detach().clone(), b.detach().clone())

    def dev_score(step):
        if not dev:
            return None
        rep = evaluate(Classifier(enc, config, w.detach(), b.detach(), labels, vocab, hc), dev)
        clf.dev_curve.append({"step": step, "macro_f1": rep.macro_f1, "accuracy": rep.accuracy})
        return rep.macro_f1

    best, best_state = dev_score(0), snapshot()
    clf.best_step = 0
    trainable = [w, b] + ([] if hc.freeze_encoder else list(enc.values()))
    decay = [w] + [v for k, v in enc.items() if _kind(k) == "weight" and not hc.freeze_encoder]
    no_decay = [p for p in trainable if all(p is not d for d in decay)]
    optim = torch.optim.AdamW([{"params": decay, "weight_decay": hc.weight_decay},
                               {"params": no_decay, "weight_decay": 0.0}], lr=hc.learning_rate, foreach=False)
    sched = torch.optim.lr_scheduler.LambdaLR(
        optim, _schedule(OptimizerConfig(num_steps=hc.num_steps, warmup_fraction=hc.warmup_fraction)))
    rng = np.random.default_rng(hc.seed)
    order, cursor = rng.permutation(len(rows)), 0
    for step in range(1, hc.num_steps + 1):
        picked = []
        while len(picked) < min(hc.batch_size, len(rows)):
            if cursor == len(order):
                order, cursor = rng.permutation(len(rows)), 0
            picked.append(int(order[cursor]))
            cursor += 1
        optim.zero_grad(set_to_none=True)
        z = _logits(enc, config, w, b, [rows[i] for i in picked], train_mode=True,
                    seed=hc.seed * 1_000_003 + step, dropout=hc.dropout)
        loss = F.cross_entropy(z, y[picked])
        if not math.isfinite(loss.item()):
            raise NonFiniteLossError(step, loss.item())
        loss.backward()
        optim.step()
        sched.step()
        if step % hc.eval_every == 0 or step == hc.num_steps:
            score = dev_score(step)
            if score is not None and score > best:
                best, best_state, clf.best_step = score, snapshot(), step
            elif score is None:
                best_state, clf.best_step = snapshot(), step

    enc_best, w_best, b_best = best_state
    clf.encoder_params, clf.head_weight, clf.head_bias = enc_best, w_best, b_best
    return clf


def metrics_report(report: ClassificationReport, clf: Optional[Classifier] = None) -> dict:
    out = report.to_json()
    if clf is not None:
        out["labels"] = list(clf.labels)
        out["best_step"] = clf.best_step
        out["dev_curve"] = clf.dev_curve
    return out


def write_report(report: dict, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class TextClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`finetune`.

    ``fit(X, y, eval_set=(X_dev, y_dev))``; without an eval set the final
    step is kept. ``encoder_params=None`` starts from a fresh init.
    """

    def __init__(self, tokenizer: Union[UnigramTokenizer, Vocab, None] = None,
                 encoder_config: Optional[EncoderConfig] = None, encoder_params=None,
                 head_config: Optional[HeadConfig] = None, random_state: int = 0):
        self.tokenizer = tokenizer
        self.encoder_config = encoder_config
        self.encoder_params = encoder_params
        self.head_config = head_config
        self.random_state = random_state

    def _vocab(self) -> Vocab:
        tok = self.tokenizer
        if isinstance(tok, Vocab):
            return tok
        if isinstance(tok, UnigramTokenizer):
            check_is_fitted(tok, "vocab_")
            return tok.vocab_
        raise ValueError("tokenizer must be a fitted UnigramTokenizer or a Vocab")

    def fit(self, X, y, eval_set=None):
        vocab = self._vocab()
        config = self.encoder_config or EncoderConfig(vocab_size=len(vocab))
        params = self.encoder_params if self.encoder_params is not None else init_params(config, self.random_state)
        train = [LabeledText(t, str(l)) for t, l in zip(X, y, strict=True)]
        dev = [LabeledText(t, str(l)) for t, l in zip(*eval_set, strict=True)] if eval_set else []
        self.model_ = finetune(params, config, train, dev, self.head_config or HeadConfig(seed=self.random_state), vocab)
        self.classes_ = np.array(self.model_.labels)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return class_scores(self.model_, list(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.array(predict(self.model_, list(X)), dtype=object)
