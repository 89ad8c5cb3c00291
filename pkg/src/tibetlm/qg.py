"""Answer-aware question generation: BiLSTM + self-attention encoder, LSTM
decoder with attention and a pointer-generator copy gate."""
from __future__ import annotations

import json
import math
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import EncoderConfig, NonFiniteLossError, forward as encoder_forward, Batch
from .metrics import corpus_bleu
from .segmenter import segment_syllables
from .unigram import Vocab

PAD, UNK, BOS, EOS = 0, 1, 2, 3
QG_SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
EMBEDDING_SOURCES = ("random", "pretrained-encoder")


@dataclass(frozen=True)
class QGExample:
    paragraph: tuple
    answer_span: tuple
    question: tuple
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "paragraph", tuple(self.paragraph))
        object.__setattr__(self, "question", tuple(self.question))
        object.__setattr__(self, "answer_span", tuple(self.answer_span))
        start, end = self.answer_span
        if not 0 <= start <= end < len(self.paragraph):
            raise ValueError(f"answer span {self.answer_span} outside paragraph of length {len(self.paragraph)}")
        if not self.question:
            raise ValueError("question must be non-empty")

    @property
    def answer(self) -> tuple:
        s, e = self.answer_span
        return self.paragraph[s:e + 1]


@dataclass(frozen=True)
class QGConfig:
    hidden_size: int = 300
    embedding_size: int = 768
    batch_size: int = 64
    dropout: float = 0.3
    learning_rate: float = 0.1
    num_epochs: int = 20
    vocab_size: int = 30005
    answer_feature_size: int = 16
    optimizer: str = "sgd"
    max_grad_norm: float = 5.0
    copy: bool = True
    max_question_len: int = 32
    freeze_embeddings: bool = True
    contextual_features: bool = False
    init_range: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_size", "embedding_size", "batch_size", "vocab_size", "answer_feature_size",
                     "max_question_len"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.num_epochs < 0:
            raise ValueError("num_epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.vocab_size <= len(QG_SPECIALS):
            raise ValueError("vocab_size must exceed the number of special tokens")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "QGConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown qg config keys: {sorted(unknown)}")
        return cls(**obj)


class QGVocab:
    """Token <-> id map; ids 0..3 play the pad / unk / start / end roles."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if len(self.tokens) < 4:
            raise ValueError("vocabulary needs the four role tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], max_size: int, min_count: int = 1) -> "QGVocab":
        counts = Counter(t for seq in sequences for t in seq)
        ranked = sorted((t for t, c in counts.items() if c >= min_count and t not in QG_SPECIALS),
                        key=lambda t: (-counts[t], t))
        return cls(list(QG_SPECIALS) + ranked[: max(max_size - len(QG_SPECIALS), 0)])

    @classmethod
    def from_unigram(cls, vocab: Vocab) -> "QGVocab":
        """Reuse the subword vocabulary; [PAD], [UNK], [CLS], [SEP] take the roles."""
        return cls([vocab.id_to_piece(i) for i in range(len(vocab))])

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "QGVocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


# -- parameters -----------------------------------------------------------------

def param_shapes(config: QGConfig, vocab_size: int) -> "OrderedDict[str, tuple]":
    E, H, A = config.embedding_size, config.hidden_size, config.answer_feature_size
    s = OrderedDict()
    s["emb.word"] = (vocab_size, E)
    s["emb.answer"] = (2, A)
    for d in ("fwd", "bwd"):
        s[f"enc.{d}.w_ih"] = (E + A, 4 * H)
        s[f"enc.{d}.w_hh"] = (H, 4 * H)
        s[f"enc.{d}.b"] = (4 * H,)
    s["sa.w"] = (2 * H, 2 * H)
    s["sa.fuse.w"] = (4 * H, 2 * H)
    s["sa.fuse.b"] = (2 * H,)
    s["sa.gate.w"] = (4 * H, 2 * H)
    s["sa.gate.b"] = (2 * H,)
    s["bridge.w"] = (2 * H, H)
    s["bridge.b"] = (H,)
    s["dec.w_ih"] = (E + H, 4 * H)
    s["dec.w_hh"] = (H, 4 * H)
    s["dec.b"] = (4 * H,)
    s["attn.w"] = (H, 2 * H)
    s["comb.w"] = (3 * H, H)
    s["comb.b"] = (H,)
    s["out.w"] = (H, vocab_size)
    s["out.b"] = (vocab_size,)
    s["gate.w"] = (3 * H + E, 1)
    s["gate.b"] = (1,)
    return s


def init_qg_params(config: QGConfig, vocab_size: int, seed: int = 0,
                   embeddings: Optional[torch.Tensor] = None) -> "OrderedDict[str, torch.Tensor]":
    """Uniform(-r, r) weights, zero biases with LSTM forget-gate bias 1."""
    gen = torch.Generator().manual_seed(int(seed))
    H, r = config.hidden_size, config.init_range
    params = OrderedDict()
    for name, shape in param_shapes(config, vocab_size).items():
        if name.split(".")[-1] == "b":
            t = torch.zeros(shape)
            if name in ("enc.fwd.b", "enc.bwd.b", "dec.b"):
                t[H:2 * H] = 1.0
        else:
            t = (torch.rand(shape, generator=gen) * 2 - 1) * r
        params[name] = t
    if embeddings is not None:
        if tuple(embeddings.shape) != params["emb.word"].shape:
            raise ValueError(f"embedding table shape {tuple(embeddings.shape)} != {params['emb.word'].shape}")
        params["emb.word"] = embeddings.detach().float().clone()
    return params


# -- encoder --------------------------------------------------------------------

def lstm_cell(x, h, c, w_ih, w_hh, b):
    """Gate order i, f, g, o."""
    z = x @ w_ih + h @ w_hh + b
    i, f, g, o = z.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    return torch.sigmoid(o) * torch.tanh(c), c


def run_lstm(x, mask, w_ih, w_hh, b, reverse=False):
    """(B, S, D) inputs -> (B, S, H) states; padded steps carry state unchanged."""
    B, S, _ = x.shape
    H = w_hh.shape[0]
    h = x.new_zeros(B, H)
    c = x.new_zeros(B, H)
    out = [None] * S
    steps = range(S - 1, -1, -1) if reverse else range(S)
    for t in steps:
        m = mask[:, t].unsqueeze(-1).to(x.dtype)
        h2, c2 = lstm_cell(x[:, t], h, c, w_ih, w_hh, b)
        h = m * h2 + (1 - m) * h
        c = m * c2 + (1 - m) * c
        out[t] = h
    return torch.stack(out, dim=1)


def _dropout(x, p, gen):
    if gen is None or p == 0.0:
        return x
    return x * (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p) / (1.0 - p)


class EncoderStates(NamedTuple):
    states: torch.Tensor     # (B, S, 2H) after self-attention
    forward: torch.Tensor    # (B, S, H)
    backward: torch.Tensor   # (B, S, H)
    mask: torch.Tensor       # (B, S)
    init_h: torch.Tensor     # (B, H)


def _encode(params, config, src_emb, answer, mask, gen=None) -> EncoderStates:
    x = torch.cat([src_emb, params["emb.answer"][answer]], dim=-1)
    x = _dropout(x, config.dropout, gen)
    fwd = run_lstm(x, mask, params["enc.fwd.w_ih"], params["enc.fwd.w_hh"], params["enc.fwd.b"])
    bwd = run_lstm(x, mask, params["enc.bwd.w_ih"], params["enc.bwd.w_hh"], params["enc.bwd.b"], reverse=True)
    u = torch.cat([fwd, bwd], dim=-1)
    scores = (u @ params["sa.w"]) @ u.transpose(1, 2)
    scores = scores.masked_fill((mask == 0)[:, None, :], float("-inf"))
    ctx = torch.softmax(scores, dim=-1) @ u
    uc = torch.cat([u, ctx], dim=-1)
    fused = torch.tanh(uc @ params["sa.fuse.w"] + params["sa.fuse.b"])
    g = torch.sigmoid(uc @ params["sa.gate.w"] + params["sa.gate.b"])
    states = g * fused + (1 - g) * u
    lengths = mask.sum(1).long()
    last_fwd = fwd[torch.arange(len(lengths)), lengths - 1]
    init_h = torch.tanh(torch.cat([last_fwd, bwd[:, 0]], dim=-1) @ params["bridge.w"] + params["bridge.b"])
    return EncoderStates(states, fwd, bwd, mask, init_h)


# -- model ----------------------------------------------------------------------

@dataclass
class QGModel:
    params: "OrderedDict[str, torch.Tensor]"
    config: QGConfig
    vocab: QGVocab
    embeddings_source: str = "random"
    encoder: Optional[tuple] = None           # (params, EncoderConfig) for contextual features
    history: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)


def _source_embeddings(model: QGModel, src_ids, mask):
    if model.config.contextual_features and model.encoder is not None:
        enc_params, enc_cfg = model.encoder
        with torch.no_grad():
            b = Batch(src_ids, torch.zeros_like(src_ids), mask, torch.full_like(src_ids, -1),
                      torch.zeros(len(src_ids), dtype=torch.long))
            return encoder_forward(enc_params, enc_cfg, b, heads=False).sequence.float()
    return model.params["emb.word"][src_ids]


class SourceBatch(NamedTuple):
    ids: torch.Tensor        # in-vocab ids (OOV -> UNK)
    ext_ids: torch.Tensor    # OOVs numbered V, V+1, ... per example
    answer: torch.Tensor
    mask: torch.Tensor
    oovs: list               # per-example OOV token lists


def make_source_batch(examples: Sequence[QGExample], vocab: QGVocab) -> SourceBatch:
    S = max(len(e.paragraph) for e in examples)
    V = len(vocab)
    ids, ext, ans, mask, oovs = [], [], [], [], []
    for e in examples:
        row_oov: list = []
        r_ids, r_ext = [], []
        for tok in e.paragraph:
            i = vocab.id(tok)
            if tok not in vocab:
                if tok not in row_oov:
                    row_oov.append(tok)
                r_ext.append(V + row_oov.index(tok))
            else:
                r_ext.append(i)
            r_ids.append(i)
        s, t = e.answer_span
        pad = S - len(e.paragraph)
        ids.append(r_ids + [PAD] * pad)
        ext.append(r_ext + [PAD] * pad)
        ans.append([int(s <= j <= t) for j in range(len(e.paragraph))] + [0] * pad)
        mask.append([1] * len(e.paragraph) + [0] * pad)
        oovs.append(row_oov)
    as_t = lambda v: torch.tensor(v, dtype=torch.long)
    return SourceBatch(as_t(ids), as_t(ext), as_t(ans), as_t(mask), oovs)


def encode_context(model: QGModel, example: QGExample) -> EncoderStates:
    """Contextual states for one paragraph, shape ``(|paragraph|, 2 * hidden)``."""
    src = make_source_batch([example], model.vocab)
    with torch.no_grad():
        out = _encode(model.params, model.config, _source_embeddings(model, src.ids, src.mask), src.answer, src.mask)
    return EncoderStates(out.states[0], out.forward[0], out.backward[0], out.mask[0], out.init_h[0])


class DecoderState(NamedTuple):
    h: torch.Tensor
    c: torch.Tensor
    feed: torch.Tensor       # previous attentional vector (input feeding)


class StepOutput(NamedTuple):
    dist: torch.Tensor       # (B, V + n_oov)
    state: DecoderState
    attention: torch.Tensor  # (B, S)
    gate: torch.Tensor       # (B, 1)


def initial_state(enc: EncoderStates) -> DecoderState:
    h = enc.init_h
    return DecoderState(h, torch.zeros_like(h), torch.zeros_like(h))


def decode_step(params, config: QGConfig, state: DecoderState, enc: EncoderStates, prev_token: torch.Tensor,
                ext_ids: torch.Tensor, n_oov: int, gate: Optional[float] = None, gen=None) -> StepOutput:
    """One decoder step.

    ``prev_token`` holds in-vocab ids (OOV copies must be mapped to UNK by the
    caller). The output mixes ``g * P_vocab`` with ``(1 - g)`` times the
    attention mass summed per source token id over the extended vocabulary.
    ``gate`` overrides g; with ``config.copy`` false g is fixed at 1.
    """
    emb = _dropout(params["emb.word"][prev_token], config.dropout, gen)
    x = torch.cat([emb, state.feed], dim=-1)
    h, c = lstm_cell(x, state.h, state.c, params["dec.w_ih"], params["dec.w_hh"], params["dec.b"])
    scores = torch.einsum("bh,bsh->bs", h @ params["attn.w"], enc.states)
    scores = scores.masked_fill(enc.mask == 0, float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    ctx = torch.einsum("bs,bsh->bh", attn, enc.states)
    feed = torch.tanh(torch.cat([h, ctx], dim=-1) @ params["comb.w"] + params["comb.b"])
    p_vocab = torch.softmax(_dropout(feed, config.dropout, gen) @ params["out.w"] + params["out.b"], dim=-1)
    if gate is not None:
        g = torch.full((h.shape[0], 1), float(gate), dtype=h.dtype)
    elif not config.copy:
        g = torch.ones(h.shape[0], 1, dtype=h.dtype)
    else:
        g = torch.sigmoid(torch.cat([feed, ctx, emb], dim=-1) @ params["gate.w"] + params["gate.b"])
    V = p_vocab.shape[1]
    dist = torch.cat([g * p_vocab, p_vocab.new_zeros(h.shape[0], n_oov)], dim=-1)
    if not (config.copy or gate is not None):
        return StepOutput(dist, DecoderState(h, c, feed), attn, g)
    dist = dist.scatter_add(1, ext_ids, (1 - g) * attn)
    return StepOutput(dist, DecoderState(h, c, feed), attn, g)


def _targets(examples, vocab, src: SourceBatch, copy: bool):
    """Extended-vocabulary target ids (question + end token) and decoder inputs."""
    V = len(vocab)
    T = max(len(e.question) for e in examples) + 1
    tgt, inp = [], []
    for e, oov in zip(examples, src.oovs):
        ids = []
        for tok in e.question:
            if tok in vocab:
                ids.append(vocab.id(tok))
            elif copy and tok in oov:
                ids.append(V + oov.index(tok))
            else:
                ids.append(UNK)
        row = ids + [EOS]
        tgt.append(row + [PAD] * (T - len(row)))
        dec_in = [BOS] + [i if i < V else UNK for i in ids]
        inp.append(dec_in + [PAD] * (T - len(dec_in)))
    return torch.tensor(tgt), torch.tensor(inp)


def sequence_loss(model: QGModel, examples: Sequence[QGExample], gen=None) -> torch.Tensor:
    """Teacher-forced mean negative log-likelihood per target token."""
    cfg = model.config
    src = make_source_batch(examples, model.vocab)
    n_oov = max(len(o) for o in src.oovs)
    enc = _encode(model.params, cfg, _source_embeddings(model, src.ids, src.mask), src.answer, src.mask, gen)
    tgt, inp = _targets(examples, model.vocab, src, cfg.copy)
    state = initial_state(enc)
    total, count = 0.0, 0
    for t in range(tgt.shape[1]):
        out = decode_step(model.params, cfg, state, enc, inp[:, t], src.ext_ids, n_oov, gen=gen)
        state = out.state
        valid = tgt[:, t] != PAD
        p = out.dist.gather(1, tgt[:, t:t + 1]).squeeze(1)
        total = total - torch.where(valid, torch.log(p.clamp_min(1e-12)), torch.zeros_like(p)).sum()
        count += int(valid.sum())
    return total / count


# -- training -------------------------------------------------------------------

def _to_tokens(ids: Sequence[int], vocab: QGVocab, oov: Sequence[str]) -> list[str]:
    V = len(vocab)
    return [vocab.tokens[i] if i < V else oov[i - V] for i in ids]


def bleu_on(model: QGModel, examples: Sequence[QGExample], max_n: int = 4, **gen_options) -> float:
    pairs = [(generate(model, e.paragraph, e.answer_span, **gen_options) or ["<empty>"], [list(e.question)])
             for e in examples]
    return corpus_bleu(pairs, max_n)


def train_qg(dataset: Sequence[QGExample], config: QGConfig = QGConfig(), embeddings_source: str = "random",
             dev: Sequence[QGExample] = (), vocab: Optional[QGVocab] = None,
             encoder: Optional[tuple] = None, log: Optional[Callable[[dict], None]] = None) -> QGModel:
    """Teacher-forced NLL training; dev BLEU-4 is recorded after each epoch.

    ``embeddings_source='pretrained-encoder'`` takes ``encoder=(params,
    EncoderConfig)`` and uses its token embedding table (frozen unless
    ``config.freeze_embeddings`` is false); the vocabulary must then be the
    encoder's (see :meth:`QGVocab.from_unigram`).
    """
    if embeddings_source not in EMBEDDING_SOURCES:
        raise ValueError(f"embeddings_source must be one of {EMBEDDING_SOURCES}")
    if not dataset:
        raise ValueError("empty training set")
    embeddings = None
    if embeddings_source == "pretrained-encoder":
        if encoder is None or vocab is None:
            raise ValueError("pretrained-encoder embeddings need the encoder and its vocabulary")
        embeddings = encoder[0]["embeddings.word"]
        if embeddings.shape[1] != config.embedding_size:
            raise ValueError(f"embedding_size {config.embedding_size} != encoder hidden size {embeddings.shape[1]}")
    if vocab is None:
        vocab = QGVocab.build([e.paragraph for e in dataset] + [e.question for e in dataset], config.vocab_size)
    params = init_qg_params(config, len(vocab), config.seed, embeddings)
    model = QGModel(params, config, vocab, embeddings_source, encoder)
    frozen = {"emb.word"} if embeddings is not None and config.freeze_embeddings else set()
    trainable = [v.requires_grad_(True) for k, v in params.items() if k not in frozen]
    if config.optimizer == "sgd":
        optim = torch.optim.SGD(trainable, lr=config.learning_rate)
    else:
        optim = torch.optim.Adam(trainable, lr=config.learning_rate, foreach=False)
    rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.num_epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = []
        for lo in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
            gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
            optim.zero_grad(set_to_none=True)
            loss = sequence_loss(model, batch, gen if config.dropout > 0 else None)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            loss.backward()
            if config.max_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(trainable, config.max_grad_norm, foreach=False)
            optim.step()
            model.loss_trace.append(value)
            epoch_loss.append(value)
            step += 1
        record = {"epoch": epoch + 1, "loss": float(np.mean(epoch_loss))}
        if dev:
            record["dev_bleu_4"] = bleu_on(model, dev, max_len=config.max_question_len)
        model.history.append(record)
        if log:
            log(record)
    for v in params.values():
        v.requires_grad_(False)
    return model


# -- generation -----------------------------------------------------------------

def _log_dist(out: StepOutput, first: bool) -> np.ndarray:
    logp = torch.log(out.dist[0].double()).numpy().copy()
    logp[[PAD, BOS]] = -np.inf
    if first:
        logp[EOS] = -np.inf
    return logp


def generate(model: QGModel, paragraph: Sequence[str], answer_span, max_len: int = 32,
             strategy: str = "greedy", beam_size: int = 1) -> list[str]:
    """Decode until the end token or ``max_len`` tokens.

    Greedy takes the highest log-probability token (lowest id on ties). Beam
    search keeps ``beam_size`` hypotheses ranked by length-normalized log
    probability; with one beam it reproduces greedy exactly. The end token is
    never emitted first, so every output has at least one token.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if strategy not in ("greedy", "beam"):
        raise ValueError(f"strategy must be 'greedy' or 'beam', got {strategy!r}")
    ex = QGExample(tuple(paragraph), tuple(answer_span), ("_",))
    cfg = model.config
    src = make_source_batch([ex], model.vocab)
    n_oov = len(src.oovs[0])
    V = len(model.vocab)
    with torch.no_grad():
        enc = _encode(model.params, cfg, _source_embeddings(model, src.ids, src.mask), src.answer, src.mask)
        state = initial_state(enc)

        def step(state, token):
            inp = torch.tensor([token if token < V else UNK])
            return decode_step(model.params, cfg, state, enc, inp, src.ext_ids, n_oov)

        if strategy == "greedy":
            out_ids, token = [], BOS
            for t in range(max_len):
                out = step(state, token)
                state = out.state
                token = int(np.argmax(_log_dist(out, t == 0)))
                if token == EOS:
                    break
                out_ids.append(token)
            return _to_tokens(out_ids, model.vocab, src.oovs[0])
        return _to_tokens(_beam(step, state, max_len, beam_size), model.vocab, src.oovs[0])


def _beam(step, state, max_len, k):
    if k < 1:
        raise ValueError("beam_size must be >= 1")
    alive = [(0.0, [], state, BOS)]
    finished = []
    for t in range(max_len):
        cands = []
        for score, ids, st, tok in alive:
            out = step(st, tok)
            logp = _log_dist(out, t == 0)
            for j in np.argsort(-logp, kind="stable")[:k]:
                if np.isfinite(logp[j]):
                    cands.append((score + logp[j], ids, int(j), out.state))
        # stable sort: earlier hypotheses and lower ids win ties
        cands.sort(key=lambda c: -c[0] / (len(c[1]) + 1))
        alive = []
        for total, ids, j, st in cands[:k]:
            if j == EOS:
                finished.append((total / (len(ids) + 1), ids))
            else:
                alive.append((total, ids + [j], st, j))
        if len(finished) >= k or not alive:
            break
    if not finished:
        finished = [(s / len(ids), ids) for s, ids, _, _ in alive]
    best = max(f[0] for f in finished)
    return next(ids for score, ids in finished if score == best)


# -- data IO --------------------------------------------------------------------

def syllable_tokens(text: str) -> list[str]:
    return list(segment_syllables(text).units)


def load_tibetan_qa(path, tokenize: Callable[[str], list[str]] = syllable_tokens) -> list[QGExample]:
    """JSON list of ``{context, question, answer, answer_start}`` (``id`` optional).

    The context is tokenized in three pieces around the answer so the span
    maps onto token indices for any tokenizer.
    """
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON list of records")
    out = []
    for n, r in enumerate(records):
        try:
            ctx, ans, start = r["context"], r["answer"], int(r["answer_start"])
            if ctx[start:start + len(ans)] != ans or not ans:
                raise ValueError("answer does not occur at answer_start")
            before, inside, after = tokenize(ctx[:start]), tokenize(ans), tokenize(ctx[start + len(ans):])
            if not inside:
                raise ValueError("answer has no tokens")
            span = (len(before), len(before) + len(inside) - 1)
            out.append(QGExample(tuple(before + inside + after), span, tuple(tokenize(r["question"])),
                                 str(r.get("id", n))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: record {n}: {exc}") from None
    return out


def write_generations(model: QGModel, examples: Sequence[QGExample], path, max_len: int = 32,
                      strategy: str = "greedy", beam_size: int = 1, joiner: str = " ") -> list[dict]:
    rows = []
    for e in examples:
        gen = generate(model, e.paragraph, e.answer_span, max_len, strategy, beam_size)
        rows.append({"id": e.id, "generated": joiner.join(gen), "references": [joiner.join(e.question)]})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
    return rows


def save_model(model: QGModel, path) -> None:
    """Directory with ``config.json``, ``vocab.txt`` and ``params.npz``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"config": model.config.to_json(), "embeddings_source": model.embeddings_source,
            "history": model.history, "names": list(model.params)}
    (d / "config.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    model.vocab.save(d / "vocab.txt")
    blob = b"".join(model.params[k].detach().numpy().astype("<f4").tobytes() for k in model.params)
    (d / "params.bin").write_bytes(blob)


def load_model(path) -> QGModel:
    d = Path(path)
    meta = json.loads((d / "config.json").read_text(encoding="utf-8"))
    config = QGConfig.from_json(meta["config"])
    vocab = QGVocab.load(d / "vocab.txt")
    raw = (d / "params.bin").read_bytes()
    params, offset = OrderedDict(), 0
    for name, shape in param_shapes(config, len(vocab)).items():
        n = math.prod(shape)
        if offset + 4 * n > len(raw):
            raise ValueError(f"{d}: truncated parameter file at {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = torch.from_numpy(arr.copy())
        offset += 4 * n
    if offset != len(raw) or list(params) != meta["names"]:
        raise ValueError(f"{d}: parameter file does not match config")
    return QGModel(params, config, vocab, meta["embeddings_source"], None, meta["history"])
