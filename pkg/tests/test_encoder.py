import math

import numpy as np
import pytest
import torch

from tibetlm.encoder import (
    EncoderConfig, MaskedLMPretrainer, NonFiniteLossError, OptimizerConfig, batch_loss, collate, forward,
    grad_check, init_params, load_checkpoint, loss, parameter_count, param_shapes, pretrain, random_batch,
    save_checkpoint, tiny_config,
)
from tibetlm.pretrain_data import NSPLabel, PretrainExample, build_pretraining_examples
from tibetlm.unigram import TokenizedSequence


# -- independent reference ------------------------------------------------------

def ref_layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


_erf = np.vectorize(math.erf)


def ref_gelu(x):
    return 0.5 * x * (1 + _erf(x / math.sqrt(2)))


def ref_forward(P, cfg, ids, segs, mask):
    """Per-example, per-head loops in numpy float64."""
    P = {k: v.detach().double().numpy() for k, v in P.items()}
    eps, nh, dh = cfg.layer_norm_eps, cfg.num_attention_heads, cfg.head_size
    mlm_out, nsp_out, pooled_out = [], [], []
    for row, seg, m in zip(ids, segs, mask):
        S = len(row)
        x = np.stack([P["embeddings.word"][t] + P["embeddings.position"][i] + P["embeddings.segment"][s]
                      for i, (t, s) in enumerate(zip(row, seg))])
        x = ref_layer_norm(x, P["embeddings.ln.weight"], P["embeddings.ln.bias"], eps)
        for layer in range(cfg.num_hidden_layers):
            w = lambda n: P[f"layer.{layer}.{n}"]
            q = x @ w("attn.query.weight") + w("attn.query.bias")
            k = x @ w("attn.key.weight") + w("attn.key.bias")
            v = x @ w("attn.value.weight") + w("attn.value.bias")
            ctx = np.zeros_like(x)
            for h in range(nh):
                sl = slice(h * dh, (h + 1) * dh)
                for i in range(S):
                    s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(S)])
                    e = np.where(np.array(m) == 1, np.exp(s - s[np.array(m) == 1].max()), 0.0)
                    a = e / e.sum()
                    ctx[i, sl] = a @ v[:, sl]
            x = ref_layer_norm(x + ctx @ w("attn.output.weight") + w("attn.output.bias"),
                               w("attn.ln.weight"), w("attn.ln.bias"), eps)
            f = ref_gelu(x @ w("ffn.in.weight") + w("ffn.in.bias")) @ w("ffn.out.weight") + w("ffn.out.bias")
            x = ref_layer_norm(x + f, w("ffn.ln.weight"), w("ffn.ln.bias"), eps)
        pooled = np.tanh(x[0] @ P["pooler.weight"] + P["pooler.bias"])
        t = ref_gelu(x @ P["mlm.transform.weight"] + P["mlm.transform.bias"])
        t = ref_layer_norm(t, P["mlm.ln.weight"], P["mlm.ln.bias"], eps)
        mlm_out.append(t @ P["embeddings.word"].T + P["mlm.bias"])
        nsp_out.append(pooled @ P["nsp.weight"] + P["nsp.bias"])
        pooled_out.append(pooled)
    return np.array(mlm_out), np.array(nsp_out), np.array(pooled_out)


def test_matches_reference_forward():
    cfg = tiny_config()
    P = init_params(cfg, 3, dtype=torch.float64)
    # perturb biases and scales so every term participates
    g = torch.Generator().manual_seed(9)
    for k in P:
        if "bias" in k or ".ln." in k:
            P[k] = P[k] + 0.1 * torch.randn(P[k].shape, generator=g, dtype=torch.float64)
    b = random_batch(cfg, 3, 7, 4)
    out = forward(P, cfg, b)
    mlm, nsp, pooled = ref_forward(P, cfg, b.input_ids.tolist(), b.segment_ids.tolist(), b.attention_mask.tolist())
    assert np.abs(out.mlm_logits.numpy() - mlm).max() < 1e-6
    assert np.abs(out.nsp_logits.numpy() - nsp).max() < 1e-6
    assert np.abs(out.pooled.numpy() - pooled).max() < 1e-6


def test_default_shapes_and_count():
    cfg = EncoderConfig()
    assert (cfg.hidden_size, cfg.num_hidden_layers, cfg.num_attention_heads, cfg.intermediate_size,
            cfg.max_position_embeddings, cfg.hidden_dropout_prob, cfg.vocab_size) == (768, 12, 12, 3072, 512, 0.1, 30005)
    report = parameter_count(cfg)
    assert report["total"] == sum(math.prod(s) for s in param_shapes(cfg).values())
    assert abs(report["total"] - 110e6) / 110e6 < 0.02


@pytest.mark.slow
def test_default_forward_shapes():
    cfg = EncoderConfig()
    P = init_params(cfg, 0)
    ex = PretrainExample((2, 5, 3, 6, 3), (0, 0, 0, 1, 1), (1,) * 5, (-1,) * 5, NSPLabel.IS_NEXT)
    with torch.no_grad():
        out = forward(P, cfg, [ex, ex])
    assert out.mlm_logits.shape == (2, 5, 30005)
    assert out.nsp_logits.shape == (2, 2) and out.pooled.shape == (2, 768)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(hidden_size=10, num_attention_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)
    with pytest.raises(ValueError):
        EncoderConfig.from_json({"hidden": 3})
    cfg = tiny_config()
    assert EncoderConfig.from_json(cfg.to_json()) == cfg


def test_init():
    cfg = tiny_config(initializer_range=0.02, vocab_size=4000, hidden_size=32, num_attention_heads=4)
    a, b = init_params(cfg, 1), init_params(cfg, 1)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["embeddings.word"], init_params(cfg, 2)["embeddings.word"])
    w = a["embeddings.word"]
    assert w.numel() >= 10 ** 5
    assert 0.018 <= w.std().item() <= 0.022
    assert w.abs().max().item() <= 2 * 0.02 / 0.8796 + 1e-6
    for k, v in a.items():
        if ".ln.weight" in k:
            assert torch.all(v == 1.0)
        elif k.endswith("bias"):
            assert torch.all(v == 0.0)


def test_errors_on_bad_input():
    cfg = tiny_config()
    P = init_params(cfg, 0)
    bad = PretrainExample((2, 11, 3), (0, 0, 0), (1, 1, 1), (-1, -1, -1), NSPLabel.IS_NEXT)
    with pytest.raises(ValueError, match="vocab_size"):
        forward(P, cfg, [bad])
    long = PretrainExample((5,) * 17, (0,) * 17, (1,) * 17, (-1,) * 17, NSPLabel.IS_NEXT)
    with pytest.raises(ValueError, match="max_position"):
        forward(P, cfg, [long])


def test_padding_invariance_and_attention_rows():
    cfg = tiny_config()
    P = init_params(cfg, 0)
    b = random_batch(cfg, 2, 9, 0)
    out = forward(P, cfg, b, return_attention=True)
    ids2 = b.input_ids.clone()
    pad = b.attention_mask[1] == 0
    assert pad.any()
    ids2[1, pad] = torch.tensor([7, 8, 9])[: int(pad.sum())]
    out2 = forward(P, cfg, b._replace(input_ids=ids2))
    keep = b.attention_mask == 1
    assert torch.allclose(out.mlm_logits[keep], out2.mlm_logits[keep], atol=1e-6)
    assert torch.allclose(out.nsp_logits, out2.nsp_logits, atol=1e-6)
    for probs in out.attention:
        assert torch.allclose(probs.sum(-1), torch.ones(()), atol=1e-6)
        assert torch.all(probs[1][:, :, pad] == 0)


def test_dropout_only_in_train_mode():
    cfg = tiny_config()
    P = init_params(cfg, 0)
    b = random_batch(cfg, 2, 6, 0)
    assert torch.equal(forward(P, cfg, b).mlm_logits, forward(P, cfg, b, seed=5).mlm_logits)
    t1 = forward(P, cfg, b, train_mode=True, seed=1).mlm_logits
    assert torch.equal(t1, forward(P, cfg, b, train_mode=True, seed=1).mlm_logits)
    assert not torch.equal(t1, forward(P, cfg, b, train_mode=True, seed=2).mlm_logits)


# -- loss -----------------------------------------------------------------------

def test_loss_analytic_cases():
    V = 13
    labels = torch.tensor([[-1, 4, 7]])
    terms = loss(torch.zeros(1, 3, V), torch.zeros(1, 2), labels, torch.tensor([0]))
    assert terms.mlm.item() == pytest.approx(math.log(V), abs=1e-6)
    assert terms.nsp.item() == pytest.approx(math.log(2), abs=1e-6)
    perfect = torch.full((1, 3, V), -1e4)
    perfect[0, 1, 4] = perfect[0, 2, 7] = 1e4
    nsp = torch.tensor([[1e4, -1e4]])
    assert loss(perfect, nsp, labels, torch.tensor([0])).total.item() == pytest.approx(0.0, abs=1e-6)
    none = loss(torch.randn(1, 3, V), torch.zeros(1, 2), torch.full((1, 3), -1), torch.tensor([1]))
    assert none.mlm.item() == 0.0


def test_loss_matches_direct_computation():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 5, 7))
    nsp = rng.normal(size=(2, 2))
    labels = np.array([[-1, 3, -1, 0, 6], [2, -1, -1, -1, 5]])
    nsp_y = np.array([1, 0])
    lse = lambda z: z.max() + math.log(np.exp(z - z.max()).sum())
    terms = [lse(logits[b, s]) - logits[b, s, labels[b, s]] for b in range(2) for s in range(5) if labels[b, s] >= 0]
    want_mlm = sum(terms) / len(terms)
    want_nsp = sum(lse(nsp[b]) - nsp[b, nsp_y[b]] for b in range(2)) / 2
    got = loss(torch.tensor(logits), torch.tensor(nsp), torch.tensor(labels), torch.tensor(nsp_y))
    assert got.mlm.item() == pytest.approx(want_mlm, abs=1e-9)
    assert got.nsp.item() == pytest.approx(want_nsp, abs=1e-9)
    assert got.total.item() == pytest.approx(want_mlm + want_nsp, abs=1e-9)


# -- gradients ------------------------------------------------------------------

def test_grad_check_tiny():
    result = grad_check(tiny_config(), seed=0, epsilon=1e-5)
    assert result.max_relative_error < 1e-4
    # every tensor contributes min(20, size) coordinates
    assert result.num_coordinates == sum(min(20, math.prod(s)) for s in param_shapes(tiny_config()).values())
    assert set(result.per_tensor) == set(param_shapes(tiny_config()))


def test_grad_check_convergence_order():
    cfg = tiny_config()
    e1 = grad_check(cfg, 0, epsilon=1e-2).max_absolute_error
    e2 = grad_check(cfg, 0, epsilon=2e-2).max_absolute_error
    assert 3.0 < e2 / e1 < 5.0


def test_zero_loss_construction_has_tiny_gradients():
    cfg = tiny_config()
    P = init_params(cfg, 0, dtype=torch.float64)
    b = random_batch(cfg, 2, 6, 0)
    b = b._replace(mlm_labels=torch.full_like(b.mlm_labels, -1), nsp_labels=torch.tensor([0, 0]))
    P["nsp.bias"] = torch.tensor([40.0, -40.0], dtype=torch.float64)
    for v in P.values():
        v.requires_grad_(True)
    terms = batch_loss(P, cfg, b)
    terms.total.backward()
    assert terms.total.item() < 1e-30
    assert max(v.grad.abs().max().item() for v in P.values()) < 1e-30


# -- training -------------------------------------------------------------------

def synthetic_examples(n=50, V=40, seed=0):
    rng = np.random.default_rng(seed)

    def sent(k):
        ids = tuple(rng.integers(5, V, size=k).tolist())
        return TokenizedSequence(ids, tuple(map(str, ids)), (True,) + tuple((rng.random(k - 1) < 0.6).tolist()))

    docs = [[sent(int(rng.integers(4, 9))) for _ in range(6)] for _ in range(n // 5)]
    return build_pretraining_examples(docs, V, seed, max_seq_len=24)[:n]


MEM_CONFIG = dict(vocab_size=40, hidden_size=32, num_attention_heads=4, intermediate_size=64,
                  max_position_embeddings=24, initializer_range=0.02)


def test_memorization():
    cfg = tiny_config(**MEM_CONFIG)
    exs = synthetic_examples()
    assert len(exs) == 50
    P = init_params(cfg, 0)
    opt = OptimizerConfig(learning_rate=1e-2, num_steps=200, batch_size=16, warmup_fraction=0.05)
    Q, trace = pretrain(P, cfg, exs, opt)
    with torch.no_grad():
        before, after = batch_loss(P, cfg, exs).mlm.item(), batch_loss(Q, cfg, exs).mlm.item()
    assert after < 0.1 * before
    assert len(trace) == 200 and trace[0]["lr"] > 0


def test_lr_zero_and_determinism():
    cfg = tiny_config(**MEM_CONFIG)
    exs = synthetic_examples(20)
    P = init_params(cfg, 0)
    Q, _ = pretrain(P, cfg, exs, OptimizerConfig(learning_rate=0.0, num_steps=5, batch_size=4))
    assert all(torch.equal(P[k], Q[k]) for k in P)
    opt = OptimizerConfig(learning_rate=1e-3, num_steps=6, batch_size=4, seed=3)
    A, ta = pretrain(P, cfg, exs, opt)
    B, tb = pretrain(P, cfg, exs, opt)
    assert ta == tb and all(torch.equal(A[k], B[k]) for k in A)


def test_schedule_warmup_then_decay():
    cfg = tiny_config(**MEM_CONFIG)
    _, trace = pretrain(init_params(cfg, 0), cfg, synthetic_examples(10),
                        OptimizerConfig(learning_rate=1.0e-3, num_steps=10, batch_size=2, warmup_fraction=0.2))
    lrs = [t["lr"] for t in trace]
    assert lrs[0] < lrs[1] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:])) and lrs[-1] < lrs[2]


def test_non_finite_loss_aborts_with_step():
    cfg = tiny_config(**MEM_CONFIG)
    P = init_params(cfg, 0)
    P["nsp.bias"] = torch.tensor([float("nan"), 0.0])
    with pytest.raises(NonFiniteLossError) as err:
        pretrain(P, cfg, synthetic_examples(10), OptimizerConfig(num_steps=3, batch_size=2))
    assert err.value.step == 0


def test_estimator_fit():
    cfg = tiny_config(**MEM_CONFIG)
    est = MaskedLMPretrainer(cfg, OptimizerConfig(learning_rate=1e-2, num_steps=20, batch_size=8))
    exs = synthetic_examples(20)
    est.fit(exs)
    assert est.trace_[-1]["loss"] < est.trace_[0]["loss"]
    assert est.get_params()["random_state"] == 0
    assert est.score(exs) < 0


# -- checkpoint -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    P = init_params(cfg, 0)
    save_checkpoint(tmp_path / "a.ckpt", P, cfg, {"step": 3})
    Q, cfg2, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg2 == cfg and meta == {"step": 3}
    assert list(Q) == list(P) and all(torch.equal(P[k], Q[k]) for k in P)
    save_checkpoint(tmp_path / "b.ckpt", Q, cfg, {"step": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "d.ckpt").write_bytes(b"junk" + raw)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "d.ckpt")


def test_collate_pads_ragged_batch():
    a = PretrainExample((2, 5, 3), (0, 0, 0), (1, 1, 1), (-1, 5, -1), NSPLabel.IS_NEXT)
    b = PretrainExample((2, 5, 3, 6, 3), (0, 0, 0, 1, 1), (1,) * 5, (-1,) * 5, NSPLabel.NOT_NEXT)
    batch = collate([a, b])
    assert batch.input_ids.shape == (2, 5)
    assert batch.attention_mask[0].tolist() == [1, 1, 1, 0, 0]
    assert batch.mlm_labels[0].tolist() == [-1, 5, -1, -1, -1]
    assert batch.nsp_labels.tolist() == [0, 1]
