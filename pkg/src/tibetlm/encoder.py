"""BERT-style transformer encoder with masked-LM and next-sentence heads.

Parameters live in a flat ordered ``dict[str, Tensor]`` keyed by the names
returned from :func:`param_shapes`; all computation is functional so the same
tensors can be driven by autograd, finite differences or an optimizer.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from . import SCHEMA_VERSION
from .pretrain_data import IGNORE_INDEX, PretrainExample
from .unigram import PAD_ID

EncoderParams = "OrderedDict[str, torch.Tensor]"

CHECKPOINT_MAGIC = b"TLMCKPT\x00"
# std of a standard normal truncated to [-2, 2]
_TRUNC_STD = 0.87962566103423978


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 768
    num_hidden_layers: int = 12
    num_attention_heads: int = 12
    intermediate_size: int = 3072
    max_position_embeddings: int = 512
    hidden_dropout_prob: float = 0.1
    vocab_size: int = 30005
    type_vocab_size: int = 2
    attention_dropout_prob: float = 0.1
    layer_norm_eps: float = 1e-12
    initializer_range: float = 0.02

    def __post_init__(self):
        for name in ("hidden_size", "num_hidden_layers", "num_attention_heads", "intermediate_size",
                     "max_position_embeddings", "vocab_size", "type_vocab_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.num_attention_heads:
            raise ValueError(f"hidden_size={self.hidden_size} is not divisible by "
                             f"num_attention_heads={self.num_attention_heads}")
        for name in ("hidden_dropout_prob", "attention_dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v!r}")
        if not (self.layer_norm_eps > 0 and self.initializer_range > 0):
            raise ValueError("layer_norm_eps and initializer_range must be positive")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_attention_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW with linear warmup to ``learning_rate`` then linear decay to 0."""
    learning_rate: float = 1e-4
    num_steps: int = 1000
    batch_size: int = 32
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.num_steps < 0 or self.batch_size < 1:
            raise ValueError("num_steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "OptimizerConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**obj)


# -- parameters -----------------------------------------------------------------

def param_shapes(config: EncoderConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape for every tensor. Linear weights are stored (in, out)."""
    H, I, V = config.hidden_size, config.intermediate_size, config.vocab_size
    s = OrderedDict()
    s["embeddings.word"] = (V, H)
    s["embeddings.position"] = (config.max_position_embeddings, H)
    s["embeddings.segment"] = (config.type_vocab_size, H)
    s["embeddings.ln.weight"] = (H,)
    s["embeddings.ln.bias"] = (H,)
    for i in range(config.num_hidden_layers):
        p = f"layer.{i}."
        for proj in ("query", "key", "value", "output"):
            s[p + f"attn.{proj}.weight"] = (H, H)
            s[p + f"attn.{proj}.bias"] = (H,)
        s[p + "attn.ln.weight"] = (H,)
        s[p + "attn.ln.bias"] = (H,)
        s[p + "ffn.in.weight"] = (H, I)
        s[p + "ffn.in.bias"] = (I,)
        s[p + "ffn.out.weight"] = (I, H)
        s[p + "ffn.out.bias"] = (H,)
        s[p + "ffn.ln.weight"] = (H,)
        s[p + "ffn.ln.bias"] = (H,)
    s["pooler.weight"] = (H, H)
    s["pooler.bias"] = (H,)
    # MLM decoder matrix is tied to embeddings.word; only its bias is separate
    s["mlm.transform.weight"] = (H, H)
    s["mlm.transform.bias"] = (H,)
    s["mlm.ln.weight"] = (H,)
    s["mlm.ln.bias"] = (H,)
    s["mlm.bias"] = (V,)
    s["nsp.weight"] = (H, 2)
    s["nsp.bias"] = (2,)
    return s


def _kind(name: str) -> str:
    if ".ln." in name:
        return "ln_weight" if name.endswith("weight") else "bias"
    if name.endswith("bias"):
        return "bias"
    return "weight"


def parameter_count(config: EncoderConfig) -> dict:
    """Break the total down by component (tied MLM decoder counted once)."""
    shapes = param_shapes(config)
    groups = {"embeddings": 0, "layers": 0, "pooler": 0, "mlm_head": 0, "nsp_head": 0}
    for name, shape in shapes.items():
        head = name.split(".")[0]
        key = {"embeddings": "embeddings", "layer": "layers", "pooler": "pooler",
               "mlm": "mlm_head", "nsp": "nsp_head"}[head]
        groups[key] += math.prod(shape)
    groups["encoder_with_pooler"] = groups["embeddings"] + groups["layers"] + groups["pooler"]
    groups["total"] = groups["encoder_with_pooler"] + groups["mlm_head"] + groups["nsp_head"]
    groups["mlm_decoder_tied"] = True
    return groups


def check_params(params: Mapping[str, torch.Tensor], config: EncoderConfig) -> None:
    shapes = param_shapes(config)
    if list(params) != list(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ValueError(f"parameter names do not match config (missing {sorted(missing)[:3]}, "
                         f"extra {sorted(extra)[:3]})")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {tuple(params[name].shape)} != {shape}")


def init_params(config: EncoderConfig, seed: int = 0, dtype=torch.float32) -> "EncoderParams":
    """Truncated normal (2 sigma) weights rescaled to std ``initializer_range``;
    zero biases; unit layer-norm scales."""
    gen = torch.Generator().manual_seed(int(seed))
    sigma = config.initializer_range / _TRUNC_STD
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        kind = _kind(name)
        if kind == "weight":
            t = torch.empty(shape, dtype=torch.float64)
            torch.nn.init.trunc_normal_(t, 0.0, sigma, -2 * sigma, 2 * sigma, generator=gen)
            t = t.to(dtype)
        elif kind == "ln_weight":
            t = torch.ones(shape, dtype=dtype)
        else:
            t = torch.zeros(shape, dtype=dtype)
        params[name] = t
    return params


# -- forward --------------------------------------------------------------------

class Batch(NamedTuple):
    input_ids: torch.Tensor
    segment_ids: torch.Tensor
    attention_mask: torch.Tensor
    mlm_labels: torch.Tensor
    nsp_labels: torch.Tensor


class ForwardOutput(NamedTuple):
    mlm_logits: torch.Tensor
    nsp_logits: torch.Tensor
    pooled: torch.Tensor
    sequence: torch.Tensor
    attention: Optional[list]


class LossTerms(NamedTuple):
    total: torch.Tensor
    mlm: torch.Tensor
    nsp: torch.Tensor


def collate(examples: Sequence[PretrainExample]) -> Batch:
    """Stack examples, right-padding to the longest one."""
    if not examples:
        raise ValueError("empty batch")
    S = max(len(e) for e in examples)

    def col(attr, fill):
        return torch.tensor([list(getattr(e, attr)) + [fill] * (S - len(e)) for e in examples], dtype=torch.long)

    return Batch(col("input_ids", PAD_ID), col("segment_ids", 0), col("attention_mask", 0),
                 col("mlm_labels", IGNORE_INDEX),
                 torch.tensor([int(e.nsp_label) for e in examples], dtype=torch.long))


def _as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    if isinstance(batch, PretrainExample):
        return collate([batch])
    return collate(list(batch))


def _dropout(x, p, gen):
    if p == 0.0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _layer_norm(x, params, prefix, eps):
    return F.layer_norm(x, x.shape[-1:], params[prefix + ".weight"], params[prefix + ".bias"], eps)


def _linear(x, params, prefix):
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def _gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def forward(params: Mapping[str, torch.Tensor], config: EncoderConfig, batch, train_mode: bool = False,
            seed: int = 0, return_attention: bool = False, heads: bool = True) -> ForwardOutput:
    """Logits for both heads. Dropout is drawn from ``seed`` only when ``train_mode``.

    With ``heads=False`` only the sequence states and pooled vector are
    computed; the logit fields are ``None``.
    """
    b = _as_batch(batch)
    ids, segs, mask = b.input_ids, b.segment_ids, b.attention_mask
    B, S = ids.shape
    if S > config.max_position_embeddings:
        raise ValueError(f"sequence length {S} exceeds max_position_embeddings={config.max_position_embeddings}")
    if ids.numel() and (int(ids.max()) >= config.vocab_size or int(ids.min()) < 0):
        raise ValueError(f"token id out of range for vocab_size={config.vocab_size}")
    if segs.numel() and (int(segs.max()) >= config.type_vocab_size or int(segs.min()) < 0):
        raise ValueError("segment id out of range")

    gen = torch.Generator().manual_seed(int(seed)) if train_mode else None
    p_hidden, p_attn = config.hidden_dropout_prob, config.attention_dropout_prob
    eps = config.layer_norm_eps
    nh, dh = config.num_attention_heads, config.head_size

    x = (params["embeddings.word"][ids] + params["embeddings.position"][:S].unsqueeze(0)
         + params["embeddings.segment"][segs])
    x = _dropout(_layer_norm(x, params, "embeddings.ln", eps), p_hidden, gen)

    key_mask = (mask == 0)[:, None, None, :]
    attentions = [] if return_attention else None
    for i in range(config.num_hidden_layers):
        p = f"layer.{i}."

        def heads(t):
            return t.view(B, S, nh, dh).transpose(1, 2)

        q = heads(_linear(x, params, p + "attn.query"))
        k = heads(_linear(x, params, p + "attn.key"))
        v = heads(_linear(x, params, p + "attn.value"))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(key_mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if attentions is not None:
            attentions.append(probs)
        ctx = (_dropout(probs, p_attn, gen) @ v).transpose(1, 2).reshape(B, S, -1)
        out = _dropout(_linear(ctx, params, p + "attn.output"), p_hidden, gen)
        x = _layer_norm(x + out, params, p + "attn.ln", eps)
        h = _linear(_gelu(_linear(x, params, p + "ffn.in")), params, p + "ffn.out")
        x = _layer_norm(x + _dropout(h, p_hidden, gen), params, p + "ffn.ln", eps)

    pooled = torch.tanh(_linear(x[:, 0], params, "pooler"))
    if not heads:
        return ForwardOutput(None, None, pooled, x, attentions)
    t = _layer_norm(_gelu(_linear(x, params, "mlm.transform")), params, "mlm.ln", eps)
    mlm_logits = t @ params["embeddings.word"].T + params["mlm.bias"]
    nsp_logits = _linear(pooled, params, "nsp")
    return ForwardOutput(mlm_logits, nsp_logits, pooled, x, attentions)


def loss(mlm_logits: torch.Tensor, nsp_logits: torch.Tensor, mlm_labels: torch.Tensor,
         nsp_labels: torch.Tensor) -> LossTerms:
    """Mean MLM cross-entropy over labelled positions plus mean NSP cross-entropy."""
    if mlm_logits.shape[:2] != mlm_labels.shape or nsp_logits.shape[0] != nsp_labels.shape[0]:
        raise ValueError("logit and label shapes are inconsistent")
    flat = mlm_labels.reshape(-1)
    n = int((flat != IGNORE_INDEX).sum())
    if n == 0:
        mlm = mlm_logits.sum() * 0.0
    else:
        mlm = F.cross_entropy(mlm_logits.reshape(-1, mlm_logits.shape[-1]), flat,
                              ignore_index=IGNORE_INDEX, reduction="sum") / n
    nsp = F.cross_entropy(nsp_logits, nsp_labels)
    return LossTerms(mlm + nsp, mlm, nsp)


def batch_loss(params, config, batch, train_mode=False, seed=0) -> LossTerms:
    b = _as_batch(batch)
    out = forward(params, config, b, train_mode, seed)
    return loss(out.mlm_logits, out.nsp_logits, b.mlm_labels, b.nsp_labels)


# -- gradient check --------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    per_tensor: dict
    num_coordinates: int
    max_absolute_error: float = 0.0

    def __float__(self):
        return self.max_relative_error


def tiny_config(**overrides) -> EncoderConfig:
    """Small config for checks: hidden 8, 2 heads, 2 layers, vocab 11.

    The larger init scale keeps attention query/key gradients well above
    the roundoff of a finite difference."""
    base = dict(hidden_size=8, num_hidden_layers=2, num_attention_heads=2, intermediate_size=16,
                max_position_embeddings=16, vocab_size=11, initializer_range=0.2)
    base.update(overrides)
    return EncoderConfig(**base)


def random_batch(config: EncoderConfig, batch_size: int, seq_len: int, seed: int) -> Batch:
    """Synthetic batch with a padded tail in the last row and some labelled positions."""
    g = torch.Generator().manual_seed(int(seed))
    ids = torch.randint(5 if config.vocab_size > 5 else 0, config.vocab_size, (batch_size, seq_len), generator=g)
    segs = (torch.arange(seq_len) >= seq_len // 2).long().expand(batch_size, -1).clone()
    mask = torch.ones(batch_size, seq_len, dtype=torch.long)
    if batch_size > 1 and seq_len > 2:
        mask[-1, seq_len - seq_len // 3:] = 0
        ids[-1, seq_len - seq_len // 3:] = PAD_ID
    labels = torch.full((batch_size, seq_len), IGNORE_INDEX, dtype=torch.long)
    pick = (torch.rand(batch_size, seq_len, generator=g) < 0.4) & (mask == 1)
    pick[:, min(1, seq_len - 1)] = True
    labels[pick] = torch.randint(0, config.vocab_size, (int(pick.sum()),), generator=g)
    nsp = torch.randint(0, 2, (batch_size,), generator=g)
    return Batch(ids, segs, mask, labels, nsp)


def grad_check(config: EncoderConfig, seed: int = 0, epsilon: float = 1e-5, coords_per_tensor: int = 20,
               batch_size: int = 2, seq_len: int = 6, params=None, batch=None) -> GradCheckResult:
    """Autograd vs central differences in float64 with dropout off.

    Relative error is ``|a - n| / max(|a|, |n|)``. Coordinates where both
    values lie under the difference quotient's roundoff floor (about
    ``100 * eps_mach * |loss| / epsilon``) are structural zeros, such as
    attention key biases, and are reported with absolute error only.
    """
    source = params if params is not None else init_params(config, seed)
    params = OrderedDict((k, v.detach().double().clone().requires_grad_(True)) for k, v in source.items())
    batch = _as_batch(batch) if batch is not None else random_batch(config, batch_size, seq_len, seed + 1)
    total = batch_loss(params, config, batch).total
    total.backward()
    floor = 100 * np.finfo(np.float64).eps * max(abs(total.item()), 1.0) / epsilon
    rng = np.random.default_rng(seed)
    worst = worst_abs = 0.0
    per_tensor, count = {}, 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            grad = p.grad.view(-1)
            k = min(coords_per_tensor, flat.numel())
            err = 0.0
            for j in rng.choice(flat.numel(), size=k, replace=False):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                up = batch_loss(params, config, batch).total.item()
                flat[j] = orig - epsilon
                down = batch_loss(params, config, batch).total.item()
                flat[j] = orig
                num = (up - down) / (2 * epsilon)
                ana = grad[j].item()
                worst_abs = max(worst_abs, abs(num - ana))
                scale = max(abs(num), abs(ana))
                if scale > floor:
                    err = max(err, abs(num - ana) / scale)
            per_tensor[name] = err
            worst = max(worst, err)
            count += k
    return GradCheckResult(worst, per_tensor, count, worst_abs)


# -- training -------------------------------------------------------------------

def _schedule(opt: OptimizerConfig):
    warmup = int(round(opt.warmup_fraction * opt.num_steps))

    def factor(step):
        if warmup and step < warmup:
            return (step + 1) / warmup
        remaining = opt.num_steps - warmup
        return max(0.0, (opt.num_steps - step) / remaining) if remaining else 1.0
    return factor


def pretrain(params: Mapping[str, torch.Tensor], config: EncoderConfig, examples: Sequence[PretrainExample],
             optimizer_config: OptimizerConfig = OptimizerConfig(), dropout: bool = True):
    """AdamW over shuffled mini-batches. Returns ``(new_params, trace)``.

    ``trace`` holds one dict per step with the total, MLM and NSP losses and
    the learning rate used. Decay skips biases and layer-norm parameters.
    """
    if not examples:
        raise ValueError("no training examples")
    check_params(params, config)
    opt = optimizer_config
    work = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
    decay = [v for k, v in work.items() if _kind(k) == "weight"]
    no_decay = [v for k, v in work.items() if _kind(k) != "weight"]
    optim = torch.optim.AdamW(
        [{"params": decay, "weight_decay": opt.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=opt.learning_rate, betas=(opt.beta1, opt.beta2), eps=opt.adam_eps, foreach=False)
    sched = torch.optim.lr_scheduler.LambdaLR(optim, _schedule(opt))
    rng = np.random.default_rng(opt.seed)
    order, cursor = rng.permutation(len(examples)), 0
    trace = []
    for step in range(opt.num_steps):
        picked = []
        while len(picked) < min(opt.batch_size, len(examples)):
            if cursor == len(order):
                order, cursor = rng.permutation(len(examples)), 0
            picked.append(examples[order[cursor]])
            cursor += 1
        lr = optim.param_groups[0]["lr"]
        optim.zero_grad(set_to_none=True)
        terms = batch_loss(work, config, picked, train_mode=dropout, seed=opt.seed * 1_000_003 + step)
        value = terms.total.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, value)
        terms.total.backward()
        if opt.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(work.values(), opt.max_grad_norm, foreach=False)
        optim.step()
        sched.step()
        trace.append({"step": step, "loss": value, "mlm": terms.mlm.item(), "nsp": terms.nsp.item(), "lr": lr})
    out = OrderedDict((k, v.detach()) for k, v in work.items())
    return out, trace


# -- checkpoint -----------------------------------------------------------------

_DTYPES = {torch.float32: ("float32", "<f4"), torch.float64: ("float64", "<f8")}
_NP_TO_TORCH = {"float32": torch.float32, "float64": torch.float64}


def save_checkpoint(path: Union[str, Path], params: Mapping[str, torch.Tensor], config: EncoderConfig,
                    metadata: Optional[dict] = None) -> None:
    """Layout: magic, u32 schema version, u64 manifest length, manifest JSON,
    then each tensor as contiguous little-endian bytes in manifest order."""
    check_params(params, config)
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        if t.dtype not in _DTYPES:
            raise ValueError(f"{name}: unsupported dtype {t.dtype}")
        label, np_dtype = _DTYPES[t.dtype]
        data = t.detach().cpu().contiguous().numpy().astype(np_dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": label, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"config": config.to_json(), "tensors": entries, "metadata": metadata or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", SCHEMA_VERSION, len(manifest)))
        fh.write(manifest)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path: Union[str, Path]):
    """Returns ``(params, config, metadata)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a tibetlm checkpoint")
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {version}")
    start = 8 + 12
    manifest = json.loads(raw[start:start + n].decode("utf-8"))
    base = start + n
    config = EncoderConfig.from_json(manifest["config"])
    params = OrderedDict()
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        np_dtype = "<f4" if e["dtype"] == "float32" else "<f8"
        arr = np.frombuffer(raw, dtype=np_dtype, count=e["nbytes"] // np.dtype(np_dtype).itemsize, offset=lo)
        params[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    check_params(params, config)
    return params, config, manifest["metadata"]


# -- estimator ------------------------------------------------------------------

class MaskedLMPretrainer(BaseEstimator):
    """Estimator wrapper: ``fit(examples)`` sets ``params_`` and ``trace_``."""

    def __init__(self, config: Optional[EncoderConfig] = None, optimizer: Optional[OptimizerConfig] = None,
                 random_state: int = 0, dropout: bool = True):
        self.config = config
        self.optimizer = optimizer
        self.random_state = random_state
        self.dropout = dropout

    def fit(self, examples, y=None, init=None):
        config = self.config or EncoderConfig()
        params = init if init is not None else init_params(config, self.random_state)
        self.params_, self.trace_ = pretrain(params, config, examples, self.optimizer or OptimizerConfig(),
                                             dropout=self.dropout)
        self.config_ = config
        return self

    def score(self, examples, y=None) -> float:
        """Negative mean total loss (higher is better)."""
        with torch.no_grad():
            return -batch_loss(self.params_, self.config_, list(examples)).total.item()
