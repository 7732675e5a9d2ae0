import math

import pytest
import torch

from redpen.edits import Edit
from redpen.model import (ModelConfig, ModelError, RedPenNet, compute_span_mask, gradient_check,
                          loss_fn, params_from_bytes, params_to_bytes, span_mask)
from redpen.tokenizer import EOS, PAD, SEP, SOS
from redpen.train import collate, make_targets

TINY = dict(enc_vocab=12, dec_vocab=12, d_model=8, heads=2, enc_layers=1, dec_layers=1,
            max_src_len=12, max_tgt_len=12, dropout=0.0)


def tiny(**kw):
    return RedPenNet(ModelConfig(**{**TINY, **kw}))


def batch_of(pairs):
    return collate([make_targets(x, g) for x, g in pairs])


PAIRS = [([SOS, 6, 7, 8, EOS], [Edit(2, 3, (9,))]),
         ([SOS, 7, 9, EOS], [Edit(1, 1, (6,)), Edit(2, 3, ())]),
         ([SOS, 6, 10, 11, 8, EOS], [])]


def test_output_shapes():
    m = tiny()
    x, ft, fs, *_ = batch_of(PAIRS)
    out = m(x, ft, fs)
    B, N = ft.shape
    assert out.token_logits.shape == (B, N, 12)
    assert out.span_logits.shape == (B, N, x.shape[1])
    assert out.cross_logits.shape == (B, 2, N, x.shape[1])
    assert m.decoder[0].cross_attn.k.in_features == 8
    assert m.decoder[0].cross_attn.k.out_features == 16


def test_seeded_init_is_deterministic():
    a, b, c = tiny(seed=3), tiny(seed=3), tiny(seed=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_embedding_lookup_is_local():
    m = tiny()
    x, ft, fs, tt, ts, sm = batch_of(PAIRS[:1])
    loss_fn(m(x, ft, fs), tt, ts, sm)[0].backward()
    used = set(x.view(-1).tolist())
    g = m.enc_tok.weight.grad
    for row in range(12):
        if row not in used:
            assert torch.all(g[row] == 0)


@pytest.mark.parametrize("fed,n,want", [
    ([SOS, 5, 7], 0, 0), ([SOS], 1, 1), ([SOS, SEP], 2, 1),
    ([SOS, 9, 9, 9], 3, 0), ([SOS, 9, SEP], 3, 1), ([SOS, SEP, 9], 3, 1),
])
def test_span_mask_examples(fed, n, want):
    assert compute_span_mask(fed, n) == want


def test_span_mask_table2():
    fed = [SOS, SEP, 20, 21, SEP, 22, SEP, 4]
    assert [compute_span_mask(fed, n) for n in range(1, 9)] == [1, 1, 1, 0, 1, 1, 1, 1]
    assert span_mask(torch.tensor([fed])).tolist() == [[1, 1, 1, 0, 1, 1, 1, 1]]


def test_zeroed_pointer_gives_uniform_spans():
    m = tiny()
    with torch.no_grad():
        m.span_out.weight.zero_()
        m.span_out.bias.zero_()
    x, ft, fs, *_ = batch_of(PAIRS[:1])
    p = torch.softmax(m(x, ft, fs).span_logits, -1)
    assert torch.allclose(p, torch.full_like(p, 1 / x.shape[1]))


def test_span_logits_mask_padding():
    m = tiny()
    x, ft, fs, *_ = batch_of(PAIRS)
    out = m(x, ft, fs)
    p = torch.softmax(out.span_logits, -1)
    assert torch.all(p[x[:, None, :].expand_as(p) == PAD] == 0)


def test_loss_values():
    m = tiny()
    with torch.no_grad():
        m.out_proj.weight.zero_()
        m.out_proj.bias.zero_()
        m.span_out.weight.zero_()
        m.span_out.bias.zero_()
    x, ft, fs, tt, ts, sm = batch_of([([SOS, 6, EOS], [])])
    total, tok, span = loss_fn(m(x, ft, fs), tt, ts, sm)
    assert tok.item() == pytest.approx(math.log(12))
    assert span.item() == 0.0
    with torch.no_grad():
        m.out_proj.bias[EOS] = 100.0
    total, tok, _ = loss_fn(m(x, ft, fs), tt, ts, sm)
    assert total.item() == pytest.approx(0.0, abs=1e-6)


def test_loss_rejects_empty_mask_with_spans():
    m = tiny()
    x, ft, fs, tt, ts, sm = batch_of(PAIRS[:1])
    with pytest.raises(ModelError):
        loss_fn(m(x, ft, fs), tt, ts, torch.zeros_like(sm))


def test_gradient_check_tiny():
    torch.manual_seed(0)
    m = tiny(seed=1)
    assert gradient_check(m, batch_of(PAIRS), samples=60) < 1e-4


def test_zero_signal_gradients():
    # a batch with only PAD targets has no signal; every gradient is zero
    m = tiny()
    x, ft, fs, tt, ts, sm = batch_of(PAIRS[:1])
    tt = torch.zeros_like(tt)
    ts = torch.full_like(ts, -1)
    sm = torch.zeros_like(sm)
    loss_fn(m(x, ft, fs), tt, ts, sm)[0].backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in m.parameters())


def test_decoder_is_causal():
    m = tiny().eval()
    x, ft, fs, *_ = batch_of(PAIRS[1:2])
    base = m(x, ft, fs)
    ft2 = ft.clone()
    ft2[0, -1] = 7
    out = m(x, ft2, fs)
    k = ft.shape[1] - 1
    assert torch.allclose(base.token_logits[:, :k], out.token_logits[:, :k])
    assert torch.allclose(base.span_logits[:, :k], out.span_logits[:, :k])


def test_gated_span_feedback():
    m = tiny().eval()
    x = torch.tensor([[SOS, 6, 7, 8, EOS]])
    ft = torch.tensor([[SOS, 9, 9, 9]])
    a = m(x, ft, torch.tensor([[0, 1, 2, 1]]))
    b = m(x, ft, torch.tensor([[0, 1, 2, 3]]))
    # step 4 is gated off, so its fed span is ignored
    assert torch.equal(a.token_logits, b.token_logits)
    c = m(x, ft, torch.tensor([[0, 3, 2, 1]]))
    assert not torch.allclose(a.token_logits[:, 1:], c.token_logits[:, 1:])
    with pytest.raises(ModelError):
        m(x, torch.tensor([[SOS, SEP]]), torch.tensor([[0, 5]]))


def test_source_must_start_with_sos():
    with pytest.raises(ModelError, match="SOS"):
        tiny()(torch.tensor([[6, 7]]), torch.tensor([[SOS]]), torch.tensor([[0]]))


def test_overfits_small_set():
    torch.manual_seed(0)
    m = RedPenNet(ModelConfig(enc_vocab=20, dec_vocab=20, d_model=16, heads=2, dropout=0.0,
                              max_src_len=12, max_tgt_len=12))
    g = torch.Generator().manual_seed(0)
    pairs = []
    for _ in range(32):
        body = torch.randint(6, 20, (5,), generator=g).tolist()
        i = int(torch.randint(1, 6, (1,), generator=g))
        pairs.append(([SOS] + body + [EOS], [Edit(i, i + 1, (6 + i,))]))
    batch = batch_of(pairs)
    opt = torch.optim.Adam(m.parameters(), lr=3e-3)
    first = None
    for _ in range(200):
        loss = loss_fn(m(*batch[:3]), *batch[3:])[0]
        first = first if first is not None else loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.2 * first


def test_serialization_roundtrip(tmp_path):
    m = tiny(seed=5, span_feedback="contextual")
    blob = params_to_bytes(m)
    m2 = params_from_bytes(blob)
    assert m2.cfg == m.cfg
    assert all(torch.equal(p, q) for p, q in zip(m.parameters(), m2.parameters()))
    m.save(tmp_path / "p.bin")
    assert (tmp_path / "p.bin").read_bytes() == blob
    with pytest.raises(ModelError):
        params_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ModelError):
        params_from_bytes(blob + b"\0")


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(10, 10, d_model=10, heads=4)
    with pytest.raises(ModelError):
        ModelConfig(10, 10, span_feedback="bogus")
