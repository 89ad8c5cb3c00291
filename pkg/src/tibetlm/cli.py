"""Command-line entry point.

Every subcommand reads the pipeline config (``--config``), applies its own
flags on top, logs the resolved settings and seed to stderr, and writes its
artifacts. Failures exit non-zero with a one-line JSON error on stderr.
"""
from __future__ import annotations

import copy
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import click
import torch

from . import SCHEMA_VERSION, __version__
from .classify import HeadConfig, SplitSpec, evaluate, finetune, load_tncc, metrics_report, split_dataset
from .corpus import CleanDocument, clean_document, corpus_stats, read_clean_documents, read_raw_documents, \
    write_clean_documents
from .encoder import (EncoderConfig, NonFiniteLossError, OptimizerConfig, grad_check, init_params, load_checkpoint,
                      parameter_count, pretrain, save_checkpoint, tiny_config)
from .metrics import corpus_scores, sentence_scores
from .pretrain_data import build_pretraining_examples, read_examples, write_examples
from .qg import (QGConfig, QGVocab, load_model, load_tibetan_qa, save_model, train_qg,
                 write_generations)
from .unigram import UnigramTokenizer, Vocab, character_coverage, encode_viterbi

log = logging.getLogger("tibetlm")

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_CONFIG = 4
EXIT_NON_FINITE = 5
EXIT_BAD_DATA = 6


class CLIError(Exception):
    code = EXIT_FAILURE
    kind = "error"


class MissingInput(CLIError):
    code = EXIT_MISSING_INPUT
    kind = "missing_input"


class ConfigError(CLIError):
    code = EXIT_BAD_CONFIG
    kind = "invalid_config"


class DataError(CLIError):
    code = EXIT_BAD_DATA
    kind = "invalid_data"


# -- configuration ------------------------------------------------------------

def _fields(cls, drop=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in drop}


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "corpus": {"min_syllables": 100},
    "tokenizer": {"target_size": 30005, "coverage": 0.9995, "shrink": 0.75, "em_iters_per_round": 2,
                  "max_piece_len": 16, "max_seed": 1_000_000},
    "pretrain_data": {"select_rate": 0.15, "actions": [0.8, 0.1, 0.1], "max_seq_len": 512},
    # vocab_size is taken from the tokenizer when left null
    "encoder": {**_fields(EncoderConfig), "vocab_size": None},
    "optimizer": _fields(OptimizerConfig, drop=("seed",)),
    "grad_check": {"epsilon": 1e-5, "coords_per_tensor": 20},
    "classify": {**_fields(HeadConfig, drop=("seed",)), "split": [0.8, 0.1, 0.1]},
    "qg": {**_fields(QGConfig, drop=("seed",)), "vocab_size": None, "embeddings_source": "random",
           "split": [0.8, 0.1, 0.1], "max_len": 32, "beam_size": 1},
    "metrics": {"beta": 1.2, "max_n": 4},
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be an object")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


class PipelineConfig:
    """Resolved settings: defaults, then the config file, then flags."""

    def __init__(self, data: Optional[dict] = None):
        self.data = _merge(DEFAULTS, data or {})
        self.validate()

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise MissingInput(f"config file not found: {p.name}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls(data)

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.data[name])

    def override(self, section: Optional[str], **values) -> None:
        target = self.data if section is None else self.data[section]
        changed = False
        for key, value in values.items():
            if value is not None:
                target[key] = value
                changed = True
        if changed:
            self.validate()

    def validate(self) -> None:
        d = self.data
        try:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
                raise ValueError("seed must be a non-negative integer")
            if not isinstance(d["threads"], int) or d["threads"] < 1:
                raise ValueError("threads must be a positive integer")
            enc = d["encoder"]
            EncoderConfig(**{**enc, "vocab_size": enc["vocab_size"] or 8})
            OptimizerConfig(**d["optimizer"])
            HeadConfig(**{k: v for k, v in d["classify"].items() if k != "split"})
            SplitSpec(*d["classify"]["split"])
            q = {k: v for k, v in d["qg"].items() if k not in ("embeddings_source", "split", "max_len", "beam_size")}
            QGConfig(**{**q, "vocab_size": q["vocab_size"] or 30005})
            SplitSpec(*d["qg"]["split"])
            if d["qg"]["embeddings_source"] not in ("random", "pretrained-encoder"):
                raise ValueError("qg.embeddings_source must be 'random' or 'pretrained-encoder'")
            acts = d["pretrain_data"]["actions"]
            if len(acts) != 3 or abs(sum(acts) - 1) > 1e-9:
                raise ValueError("pretrain_data.actions must be three probabilities summing to 1")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        return copy.deepcopy(self.data)


# -- helpers --------------------------------------------------------------------

def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"input not found: {p.name}")
    return p


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _emit(obj, output: Optional[str]) -> None:
    if output:
        _write_json(obj, output)
    else:
        click.echo(json.dumps(obj, sort_keys=True, ensure_ascii=False))


def _set_threads(n: int) -> None:
    torch.set_num_threads(n)
    try:
        torch.set_num_interop_threads(n)
    except RuntimeError:
        pass  # already fixed for this process


def _load_vocab(path) -> Vocab:
    try:
        return Vocab.load(_need(path))
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad vocab file: {exc}") from None


def _sentences(path: Path) -> list[str]:
    """Clean-document JSONL gives its sentences; any other file, its non-empty lines."""
    if path.suffix == ".jsonl":
        return [s for d in read_clean_documents(path) for s in d.sentences]
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _encoder_config(cfg: PipelineConfig, vocab_size: int) -> EncoderConfig:
    enc = cfg.section("encoder")
    if enc["vocab_size"] is None:
        enc["vocab_size"] = vocab_size
    elif enc["vocab_size"] < vocab_size:
        raise ConfigError(f"encoder.vocab_size {enc['vocab_size']} is smaller than the vocabulary ({vocab_size})")
    return EncoderConfig(**enc)


def _head_config(cfg: PipelineConfig) -> HeadConfig:
    c = cfg.section("classify")
    c.pop("split")
    return HeadConfig(**c, seed=cfg.data["seed"])


def _qg_config(cfg: PipelineConfig, vocab_size: Optional[int]) -> QGConfig:
    q = cfg.section("qg")
    for k in ("embeddings_source", "split", "max_len", "beam_size"):
        q.pop(k)
    if q["vocab_size"] is None:
        q["vocab_size"] = vocab_size or 30005
    return QGConfig(**q, seed=cfg.data["seed"])


def _tokens_of(obj: dict, *keys) -> list[str]:
    for k in keys:
        if k in obj:
            v = obj[k]
            return list(v) if isinstance(v, list) else str(v).split()
    raise DataError(f"record has none of the fields {list(keys)}")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path.name}:{n}: malformed JSON ({exc.msg})") from None
    return rows


# -- operations (shared by subcommands and the pipeline) -------------------------

def op_clean(cfg, source: Path, output: Path) -> dict:
    min_syl = cfg.data["corpus"]["min_syllables"]
    kept: list[CleanDocument] = []
    raw = read_raw_documents(source)
    for doc in raw:
        clean = clean_document(doc, min_syl)
        if clean is not None:
            kept.append(clean)
    write_clean_documents(kept, output)
    stats = corpus_stats(kept).to_json()
    stats["num_input_documents"] = len(raw)
    return stats


def op_train_tokenizer(cfg, source: Path, output: Path) -> dict:
    corpus = _sentences(source)
    if not corpus:
        raise DataError("no sentences to train on")
    t = cfg.section("tokenizer")
    tok = UnigramTokenizer(**t).fit(corpus)
    tok.save(output)
    return {"vocab_size": len(tok.vocab_), "num_sentences": len(corpus),
            "character_coverage": character_coverage(corpus, tok.vocab_)}


def op_build_pretrain(cfg, source: Path, vocab: Vocab, output: Path) -> dict:
    docs = [[encode_viterbi(s, vocab) for s in d.sentences] for d in read_clean_documents(source)]
    docs = [[s for s in d if len(s)] for d in docs]
    p = cfg.section("pretrain_data")
    examples = build_pretraining_examples(docs, vocab, cfg.data["seed"], select_rate=p["select_rate"],
                                          actions=tuple(p["actions"]), max_seq_len=p["max_seq_len"])
    write_examples(examples, output)
    return {"num_examples": len(examples), "is_next": sum(int(e.nsp_label == 0) for e in examples)}


def op_pretrain(cfg, examples_path: Path, vocab_size: int, output: Path, trace_path: Optional[Path]) -> dict:
    examples = read_examples(examples_path)
    config = _encoder_config(cfg, vocab_size)
    opt = OptimizerConfig(**cfg.section("optimizer"), seed=cfg.data["seed"])
    params = init_params(config, cfg.data["seed"])
    params, trace = pretrain(params, config, examples, opt)
    save_checkpoint(output, params, config, {"steps": opt.num_steps, "seed": cfg.data["seed"]})
    if trace_path:
        _write_json({"optimizer": opt.to_json(), "trace": trace}, trace_path)
    return {"steps": len(trace), "first_loss": trace[0]["loss"] if trace else None,
            "last_loss": trace[-1]["loss"] if trace else None, "parameters": parameter_count(config)["total"]}


def op_finetune(cfg, data: Path, vocab: Vocab, checkpoint: Optional[Path], dev: Optional[Path],
                test: Optional[Path]) -> dict:
    items = load_tncc(data)
    if dev or test:
        train, dev_items, test_items = items, load_tncc(dev) if dev else [], load_tncc(test) if test else []
    else:
        train, dev_items, test_items = split_dataset(items, SplitSpec(*cfg.data["classify"]["split"]),
                                                     cfg.data["seed"])
    if checkpoint:
        params, config, _ = load_checkpoint(checkpoint)
    else:
        config = _encoder_config(cfg, len(vocab))
        params = init_params(config, cfg.data["seed"])
    labels = sorted({it.label for it in items})
    clf = finetune(params, config, train, dev_items, _head_config(cfg), vocab, labels)
    report = {"train": metrics_report(evaluate(clf, train)), "best_step": clf.best_step,
              "dev_curve": clf.dev_curve, "labels": labels}
    if test_items:
        report["test"] = metrics_report(evaluate(clf, test_items))
    return report


def _qg_tokenizer(vocab: Optional[Vocab]):
    if vocab is None:
        return None
    return lambda text: list(encode_viterbi(text, vocab).pieces) if text.strip() else []


def op_train_qg(cfg, data: Path, output: Path, vocab: Optional[Vocab], checkpoint: Optional[Path]) -> dict:
    source = cfg.data["qg"]["embeddings_source"]
    encoder = None
    if source == "pretrained-encoder":
        if vocab is None or checkpoint is None:
            raise ConfigError("pretrained-encoder embeddings need --vocab and --checkpoint")
        params, enc_cfg, _ = load_checkpoint(checkpoint)
        encoder = (params, enc_cfg)
        examples = load_tibetan_qa(data, _qg_tokenizer(vocab))
        qvocab = QGVocab.from_unigram(vocab)
        config = _qg_config(cfg, len(qvocab))
        if config.embedding_size != enc_cfg.hidden_size:
            config = QGConfig(**{**config.to_json(), "embedding_size": enc_cfg.hidden_size})
    else:
        examples = load_tibetan_qa(data) if vocab is None else load_tibetan_qa(data, _qg_tokenizer(vocab))
        config = _qg_config(cfg, None)
        qvocab = None
    if len(examples) >= 10:
        train, dev, test = split_dataset(examples, SplitSpec(*cfg.data["qg"]["split"]), cfg.data["seed"])
    else:
        train, dev, test = examples, [], []
    model = train_qg(train, config, source, dev=dev, vocab=qvocab, encoder=encoder)
    save_model(model, output)
    return {"num_train": len(train), "num_dev": len(dev), "num_test": len(test), "history": model.history}


def op_generate(cfg, model_dir: Path, data: Path, output: Path, vocab: Optional[Vocab]) -> dict:
    model = load_model(model_dir)
    examples = load_tibetan_qa(data) if vocab is None else load_tibetan_qa(data, _qg_tokenizer(vocab))
    q = cfg.data["qg"]
    strategy = "beam" if q["beam_size"] > 1 else "greedy"
    rows = write_generations(model, examples, output, q["max_len"], strategy, q["beam_size"])
    return {"num_generated": len(rows)}


def op_score(cfg, pairs: list[tuple[list, list[list]]]) -> dict:
    m = cfg.section("metrics")
    if not pairs:
        raise DataError("nothing to score")
    for c, refs in pairs:
        if not c or not refs or not all(refs):
            raise DataError("empty candidate or reference")
    corpus = corpus_scores(pairs, m["beta"], m["max_n"]).to_json()
    items = [sentence_scores(c, r, m["beta"], m["max_n"]).to_json() for c, r in pairs]
    return {"corpus": corpus, "items": items}


# -- click plumbing ---------------------------------------------------------------

class Context:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg

    def start(self, command: str) -> PipelineConfig:
        _set_threads(self.cfg.data["threads"])
        log.info(json.dumps({"command": command, "seed": self.cfg.data["seed"], "config": self.cfg.to_json()},
                            sort_keys=True))
        return self.cfg


class _StderrHandler(logging.StreamHandler):
    """Looks up sys.stderr on every record so redirected streams are honoured."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value):
        pass


def _configure_logging(level: int) -> None:
    log.setLevel(level)
    log.propagate = False
    if not any(isinstance(h, _StderrHandler) for h in log.handlers):
        h = _StderrHandler()
        h.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        log.addHandler(h)


def _version_callback(ctx, _param, value):
    if value and not ctx.resilient_parsing:
        click.echo(json.dumps({"tool": "tibetlm", "version": __version__, "schema_version": SCHEMA_VERSION}))
        ctx.exit(0)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=str, default=None, help="Pipeline config JSON.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=None, help="Bound on CPU threads (1 = bit-reproducible).")
@click.option("-q", "--quiet", is_flag=True, help="Do not log the resolved config to stderr.")
@click.option("--version", is_flag=True, expose_value=False, is_eager=True, callback=_version_callback,
              help="Print tool and schema versions.")
@click.pass_context
def cli(ctx, config_path, seed, threads, quiet):
    """Tibetan tokenizer, pretraining and evaluation pipeline."""
    _configure_logging(logging.WARNING if quiet else logging.INFO)
    cfg = PipelineConfig.load(config_path)
    cfg.override(None, seed=seed, threads=threads)
    ctx.obj = Context(cfg)


@cli.command()
@click.argument("source")
@click.option("-o", "--output", required=True, help="Clean-document JSONL to write.")
@click.option("--min-syllables", type=int, default=None)
@click.pass_obj
def clean(obj, source, output, min_syllables):
    """Normalize, filter and sentence-split raw documents."""
    obj.cfg.override("corpus", min_syllables=min_syllables)
    cfg = obj.start("clean")
    _emit(op_clean(cfg, _need(source), Path(output)), None)


@cli.command()
@click.argument("source")
@click.option("-o", "--output", default=None, help="Write the JSON report here instead of stdout.")
@click.pass_obj
def stats(obj, source, output):
    """Corpus statistics for a clean-document JSONL file."""
    obj.start("stats")
    _emit(corpus_stats(read_clean_documents(_need(source))).to_json(), output)


@cli.command("train-tokenizer")
@click.argument("source")
@click.option("-o", "--output", required=True, help="Vocabulary TSV (a .json sidecar is written next to it).")
@click.option("--target-size", type=int, default=None)
@click.option("--coverage", type=float, default=None)
@click.option("--shrink", type=float, default=None)
@click.option("--em-iters", "em_iters_per_round", type=int, default=None)
@click.pass_obj
def train_tokenizer(obj, source, output, target_size, coverage, shrink, em_iters_per_round):
    """Train the unigram subword vocabulary on clean JSONL or plain text lines."""
    obj.cfg.override("tokenizer", target_size=target_size, coverage=coverage, shrink=shrink,
                     em_iters_per_round=em_iters_per_round)
    cfg = obj.start("train-tokenizer")
    _emit(op_train_tokenizer(cfg, _need(source), Path(output)), None)


@cli.command()
@click.argument("source")
@click.option("--vocab", required=True)
@click.option("-o", "--output", required=True, help="JSONL with ids and pieces per input line.")
@click.pass_obj
def encode(obj, source, vocab, output):
    """Viterbi-segment each non-empty line of a text file."""
    obj.start("encode")
    v = _load_vocab(vocab)
    lines = _sentences(_need(source))
    with open(output, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            seq = encode_viterbi(line, v)
            fh.write(json.dumps({"ids": list(seq.ids), "pieces": list(seq.pieces)}, ensure_ascii=False) + "\n")
    _emit({"num_lines": len(lines)}, None)


@cli.command("build-pretrain")
@click.argument("source")
@click.option("--vocab", required=True)
@click.option("-o", "--output", required=True)
@click.option("--max-seq-len", type=int, default=None)
@click.option("--select-rate", type=float, default=None)
@click.pass_obj
def build_pretrain(obj, source, vocab, output, max_seq_len, select_rate):
    """Masked-LM / next-sentence examples from clean documents."""
    obj.cfg.override("pretrain_data", max_seq_len=max_seq_len, select_rate=select_rate)
    cfg = obj.start("build-pretrain")
    _emit(op_build_pretrain(cfg, _need(source), _load_vocab(vocab), Path(output)), None)


@cli.command("pretrain")
@click.argument("examples")
@click.option("--vocab", required=True, help="Vocabulary used to build the examples (sets vocab_size).")
@click.option("-o", "--output", required=True, help="Checkpoint file.")
@click.option("--trace", default=None, help="Write the per-step loss trace JSON here.")
@click.option("--steps", "num_steps", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.pass_obj
def pretrain_cmd(obj, examples, vocab, output, trace, num_steps, learning_rate, batch_size):
    """Train the encoder with the masked-LM and next-sentence losses."""
    obj.cfg.override("optimizer", num_steps=num_steps, learning_rate=learning_rate, batch_size=batch_size)
    cfg = obj.start("pretrain")
    v = _load_vocab(vocab)
    _emit(op_pretrain(cfg, _need(examples), len(v), Path(output), Path(trace) if trace else None), None)


@cli.command("grad-check")
@click.option("--epsilon", type=float, default=None)
@click.option("-o", "--output", default=None)
@click.pass_obj
def grad_check_cmd(obj, epsilon, output):
    """Finite-difference check of the encoder gradients on a tiny float64 model."""
    obj.cfg.override("grad_check", epsilon=epsilon)
    cfg = obj.start("grad-check")
    g = cfg.section("grad_check")
    res = grad_check(tiny_config(), cfg.data["seed"], g["epsilon"], g["coords_per_tensor"])
    _emit({"max_relative_error": res.max_relative_error, "num_coordinates": res.num_coordinates,
           "passed": res.max_relative_error < 1e-4}, output)


@cli.command("finetune-classify")
@click.argument("data")
@click.option("--vocab", required=True)
@click.option("--checkpoint", default=None, help="Pretrained encoder; a fresh init is used when omitted.")
@click.option("--dev", default=None, help="Dev TSV (otherwise DATA is split 8/1/1).")
@click.option("--test", default=None, help="Test TSV.")
@click.option("-o", "--output", required=True, help="JSON metrics report.")
@click.option("--steps", "num_steps", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--mode", type=click.Choice(["title", "document"]), default=None)
@click.pass_obj
def finetune_classify(obj, data, vocab, checkpoint, dev, test, output, num_steps, learning_rate, mode):
    """Fine-tune a classifier on label<TAB>text data and report macro metrics."""
    obj.cfg.override("classify", num_steps=num_steps, learning_rate=learning_rate, mode=mode)
    cfg = obj.start("finetune-classify")
    report = op_finetune(cfg, _need(data), _load_vocab(vocab), _need(checkpoint) if checkpoint else None,
                         _need(dev) if dev else None, _need(test) if test else None)
    _write_json(report, output)
    _emit({"train_accuracy": report["train"]["accuracy"], "best_step": report["best_step"]}, None)


@cli.command("train-qg")
@click.argument("data")
@click.option("-o", "--output", required=True, help="Model directory.")
@click.option("--vocab", default=None, help="Subword vocabulary (syllables are used when omitted).")
@click.option("--checkpoint", default=None, help="Encoder checkpoint for pretrained embeddings.")
@click.option("--embeddings", "embeddings_source", type=click.Choice(["random", "pretrained-encoder"]), default=None)
@click.option("--epochs", "num_epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--optimizer", type=click.Choice(["sgd", "adam"]), default=None)
@click.option("--no-copy", is_flag=True, default=False, help="Disable the copy mechanism.")
@click.pass_obj
def train_qg_cmd(obj, data, output, vocab, checkpoint, embeddings_source, num_epochs, learning_rate, optimizer,
                 no_copy):
    """Train the question generator on TibetanQA-style JSON."""
    obj.cfg.override("qg", embeddings_source=embeddings_source, num_epochs=num_epochs, learning_rate=learning_rate,
                     optimizer=optimizer, copy=False if no_copy else None)
    cfg = obj.start("train-qg")
    summary = op_train_qg(cfg, _need(data), Path(output), _load_vocab(vocab) if vocab else None,
                          _need(checkpoint) if checkpoint else None)
    _emit(summary, None)


@cli.command("generate-qg")
@click.argument("model_dir")
@click.argument("data")
@click.option("-o", "--output", required=True, help="JSONL of {id, generated, references}.")
@click.option("--vocab", default=None)
@click.option("--beam", "beam_size", type=int, default=None)
@click.option("--max-len", type=int, default=None)
@click.pass_obj
def generate_qg(obj, model_dir, data, output, vocab, beam_size, max_len):
    """Generate questions for every record in DATA."""
    obj.cfg.override("qg", beam_size=beam_size, max_len=max_len)
    cfg = obj.start("generate-qg")
    _emit(op_generate(cfg, _need(model_dir), _need(data), Path(output), _load_vocab(vocab) if vocab else None), None)


@cli.command()
@click.argument("candidates")
@click.argument("references", required=False)
@click.option("-o", "--output", default=None)
@click.option("--beta", type=float, default=None)
@click.pass_obj
def score(obj, candidates, references, output, beta):
    """BLEU-1..4 and ROUGE-L.

    With one file, each line is ``{generated, references}``. With two, lines
    are paired and tokens come from ``pieces``, ``tokens`` or whitespace-split
    ``text``.
    """
    obj.cfg.override("metrics", beta=beta)
    cfg = obj.start("score")
    cand_rows = _read_jsonl(_need(candidates))
    if references is None:
        pairs = [(_tokens_of(r, "generated", "candidate"), [str(x).split() for x in r["references"]])
                 for r in cand_rows]
    else:
        ref_rows = _read_jsonl(_need(references))
        if len(ref_rows) != len(cand_rows):
            raise DataError(f"{len(cand_rows)} candidates but {len(ref_rows)} references")
        pairs = [(_tokens_of(c, "pieces", "tokens", "text", "generated"), [_tokens_of(r, "pieces", "tokens", "text")])
                 for c, r in zip(cand_rows, ref_rows)]
    _emit(op_score(cfg, pairs), output)


def sample_path(name: str) -> Path:
    return Path(str(resources.files("tibetlm") / "data" / name))


@cli.command()
@click.option("-o", "--output", "out_dir", required=True, help="Directory for all artifacts.")
@click.option("--corpus", default=None, help="Raw corpus (defaults to the bundled sample).")
@click.option("--tncc", default=None, help="Classification TSV (defaults to the bundled sample).")
@click.option("--qa", default=None, help="QA JSON (defaults to the bundled sample).")
@click.pass_obj
def pipeline(obj, out_dir, corpus, tncc, qa):
    """Run every stage end to end. Without --config the bundled small config is used."""
    if obj.cfg.data == PipelineConfig().data:
        small = json.loads(sample_path("pipeline_small.json").read_text(encoding="utf-8"))
        obj.cfg = PipelineConfig(small)
    cfg = obj.start("pipeline")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _need(corpus) if corpus else sample_path("corpus.jsonl")
    tncc = _need(tncc) if tncc else sample_path("tncc.tsv")
    qa = _need(qa) if qa else sample_path("qa.json")

    summary = {"seed": cfg.data["seed"], "config": cfg.to_json()}
    summary["clean"] = op_clean(cfg, corpus, out / "clean.jsonl")
    _write_json(corpus_stats(read_clean_documents(out / "clean.jsonl")).to_json(), out / "stats.json")
    summary["tokenizer"] = op_train_tokenizer(cfg, out / "clean.jsonl", out / "vocab.tsv")
    vocab = Vocab.load(out / "vocab.tsv")
    summary["pretrain_data"] = op_build_pretrain(cfg, out / "clean.jsonl", vocab, out / "examples.jsonl")
    summary["pretrain"] = op_pretrain(cfg, out / "examples.jsonl", len(vocab), out / "encoder.ckpt",
                                      out / "pretrain_trace.json")
    g = cfg.section("grad_check")
    res = grad_check(tiny_config(), cfg.data["seed"], g["epsilon"], g["coords_per_tensor"])
    summary["grad_check"] = {"max_relative_error": res.max_relative_error, "passed": res.max_relative_error < 1e-4}
    report = op_finetune(cfg, tncc, vocab, out / "encoder.ckpt", None, None)
    _write_json(report, out / "classify_report.json")
    summary["classify"] = {"train_accuracy": report["train"]["accuracy"],
                           "test_macro_f1": report.get("test", {}).get("macro_f1")}
    summary["qg"] = op_train_qg(cfg, qa, out / "qg_model", None, None)
    op_generate(cfg, out / "qg_model", qa, out / "generations.jsonl", None)
    rows = _read_jsonl(out / "generations.jsonl")
    scores = op_score(cfg, [(r["generated"].split() or ["<empty>"], [x.split() for x in r["references"]])
                            for r in rows])
    _write_json(scores, out / "qg_scores.json")
    summary["qg_scores"] = scores["corpus"]
    _write_json(summary, out / "summary.json")
    _emit({"summary": "summary.json", "qg_bleu_4": scores["corpus"]["bleu_4"]}, None)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="tibetlm", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_FAILURE
    except CLIError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except NonFiniteLossError as exc:
        return _fail(EXIT_NON_FINITE, "non_finite_loss", str(exc), step=exc.step)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_INPUT, "missing_input", f"input not found: {Path(exc.filename or '').name}")
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        return _fail(EXIT_BAD_DATA, "invalid_data", str(exc))


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra},
                                ensure_ascii=False) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
