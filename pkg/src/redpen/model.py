"""Encoder-decoder that emits edit streams, with a pointer head for spans.

The decoder runs at twice the encoder width: each input row is the fed-back
token embedding plus a learned position, concatenated with the source
embedding at the fed-back span (zeroed outside span-bearing steps).  Span
logits come from the final decoder layer's cross-attention logits, one
H-vector per source position, pushed through a dense+tanh and a linear map.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import PAD, SEP, SOS

NEG_INF = -1e9
MAGIC = b"RPNP"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    enc_vocab: int
    dec_vocab: int
    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_src_len: int = 64
    max_tgt_len: int = 64
    dropout: float = 0.1
    # "embedding": raw source token embeddings; "contextual": encoder states
    span_feedback: str = "embedding"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0 <= self.dropout < 1:
            raise ModelError("dropout must be in [0, 1)")
        if self.span_feedback not in ("embedding", "contextual"):
            raise ModelError(f"unknown span_feedback {self.span_feedback!r}")

    @property
    def dec_width(self) -> int:
        return 2 * self.d_model


class StepOutputs(NamedTuple):
    token_logits: torch.Tensor  # (B, N, dec_vocab)
    span_logits: torch.Tensor  # (B, N, L)
    cross_logits: torch.Tensor  # (B, H, N, L), final decoder layer, pre-softmax


def compute_span_mask(fed_tokens, n: int, sep_id: int = SEP) -> int:
    """Span-feedback gate for autoregressive step ``n`` (1-based).

    ``fed_tokens[k]`` is the token fed at step k + 1, so ``fed_tokens[0]`` is
    SOS.  Steps 1 and 2 are always open; later steps are open when the token
    fed at this step or the previous one is SEP.
    """
    if n <= 0:
        return 0
    if n <= 2:
        return 1
    return int(fed_tokens[n - 1] == sep_id or fed_tokens[n - 2] == sep_id)


def span_mask(fed_tokens: torch.Tensor, sep_id: int = SEP) -> torch.Tensor:
    """Vectorized :func:`compute_span_mask` over (B, N) fed tokens."""
    is_sep = fed_tokens == sep_id
    prev = torch.zeros_like(is_sep)
    prev[:, 1:] = is_sep[:, :-1]
    mask = is_sep | prev
    mask[:, :2] = True
    return mask.to(torch.get_default_dtype())


class Attention(nn.Module):
    def __init__(self, d_query: int, d_kv: int, width: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q = nn.Linear(d_query, width)
        self.k = nn.Linear(d_kv, width)
        self.v = nn.Linear(d_kv, width)
        self.o = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, mask=None):
        """Return (output, pre-softmax logits).  ``mask`` is True where blocked."""
        B, N, _ = x.shape
        L = mem.shape[1]
        q = self.q(x).view(B, N, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(mem).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(mem).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = logits if mask is None else logits.masked_fill(mask, NEG_INF)
        weights = self.drop(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(B, N, -1)
        return self.o(out), logits


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int, dropout: float):
        super().__init__()
        self.up = nn.Linear(width, width * mult)
        self.down = nn.Linear(width * mult, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.down(self.drop(F.gelu(self.up(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, d, d, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        h = self.norm1(x)
        a, _ = self.attn(h, h, pad_mask)
        x = x + self.drop(a)
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.dec_width
        self.norm1 = nn.LayerNorm(w)
        self.self_attn = Attention(w, w, w, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(w)
        # keys/values lift encoder states from D to 2D
        self.cross_attn = Attention(w, cfg.d_model, w, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(w)
        self.ffn = FeedForward(w, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, mem, causal_mask, mem_mask):
        h = self.norm1(y)
        a, _ = self.self_attn(h, h, causal_mask)
        y = y + self.drop(a)
        c, cross_logits = self.cross_attn(self.norm2(y), mem, mem_mask)
        y = y + self.drop(c)
        y = y + self.drop(self.ffn(self.norm3(y)))
        return y, cross_logits


class RedPenNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, H = cfg.d_model, cfg.heads
        self.enc_tok = nn.Embedding(cfg.enc_vocab, D)
        self.enc_pos = nn.Embedding(cfg.max_src_len, D)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(D)
        self.dec_tok = nn.Embedding(cfg.dec_vocab, D)
        self.dec_pos = nn.Embedding(cfg.max_tgt_len, D)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(cfg.dec_width)
        self.out_proj = nn.Linear(cfg.dec_width, cfg.dec_vocab)
        self.span_dense = nn.Linear(H, H)
        self.span_out = nn.Linear(H, 1)
        self.drop = nn.Dropout(cfg.dropout)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Embedding):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                elif isinstance(m, nn.Linear):
                    bound = 1 / math.sqrt(m.in_features)
                    m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                    m.bias.copy_((torch.rand(m.bias.shape, generator=gen) * 2 - 1) * bound)
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    # -- encoder ---------------------------------------------------------------

    def encode_source(self, x_ids: torch.Tensor):
        """Return (contextual states, raw token embeddings), both (B, L, D)."""
        if x_ids.dim() == 1:
            x_ids = x_ids.unsqueeze(0)
        B, L = x_ids.shape
        if L > self.cfg.max_src_len:
            raise ModelError(f"source length {L} exceeds max_src_len {self.cfg.max_src_len}")
        if not bool((x_ids[:, 0] == SOS).all()):
            raise ModelError("source sequences must start with SOS")
        x_emb = self.enc_tok(x_ids)
        pos = torch.arange(L, device=x_ids.device)
        h = self.drop(x_emb + self.enc_pos(pos))
        pad = (x_ids == PAD)[:, None, None, :]
        for layer in self.encoder:
            h = layer(h, pad)
        return self.enc_norm(h), x_emb

    # -- decoder ---------------------------------------------------------------

    def build_decoder_inputs(self, fed_tokens, fed_spans, x_embeddings):
        """Rows of Concat(token_emb + position, gated source embedding), (B, N, 2D).

        ``fed_spans`` uses -1 for "no span".
        """
        B, N = fed_tokens.shape
        L = x_embeddings.shape[1]
        if N > self.cfg.max_tgt_len:
            raise ModelError(f"target length {N} exceeds max_tgt_len {self.cfg.max_tgt_len}")
        gate = span_mask(fed_tokens).to(x_embeddings.dtype) * (fed_spans >= 0).to(x_embeddings.dtype)
        if bool(((fed_spans >= L) & (gate > 0)).any()):
            raise ModelError(f"fed span index out of range for source length {L}")
        idx = fed_spans.clamp(0, L - 1)
        picked = torch.gather(x_embeddings, 1, idx.unsqueeze(-1).expand(B, N, x_embeddings.shape[2]))
        pos = torch.arange(N, device=fed_tokens.device)
        tok = self.dec_tok(fed_tokens) + self.dec_pos(pos)
        return torch.cat([tok, picked * gate.unsqueeze(-1)], dim=-1)

    def decode_states(self, enc_states, x_emb, x_ids, fed_tokens, fed_spans) -> StepOutputs:
        feedback = enc_states if self.cfg.span_feedback == "contextual" else x_emb
        y = self.drop(self.build_decoder_inputs(fed_tokens, fed_spans, feedback))
        N = y.shape[1]
        causal = torch.ones(N, N, dtype=torch.bool, device=y.device).triu(1)
        mem_mask = (x_ids == PAD)[:, None, None, :]
        cross = None
        for layer in self.decoder:
            y, cross = layer(y, enc_states, causal, mem_mask)
        token_logits = self.out_proj(self.dec_norm(y))
        feats = cross.permute(0, 2, 3, 1)  # (B, N, L, H)
        span_logits = self.span_out(torch.tanh(self.span_dense(feats))).squeeze(-1)
        span_logits = span_logits.masked_fill((x_ids == PAD)[:, None, :], NEG_INF)
        return StepOutputs(token_logits, span_logits, cross)

    def forward(self, x_ids, fed_tokens, fed_spans) -> StepOutputs:
        if x_ids.dim() == 1:
            x_ids, fed_tokens, fed_spans = x_ids[None], fed_tokens[None], fed_spans[None]
        if fed_tokens.shape != fed_spans.shape or fed_tokens.shape[0] != x_ids.shape[0]:
            raise ModelError(f"shape mismatch: x {tuple(x_ids.shape)}, tokens "
                             f"{tuple(fed_tokens.shape)}, spans {tuple(fed_spans.shape)}")
        enc, x_emb = self.encode_source(x_ids)
        return self.decode_states(enc, x_emb, x_ids, fed_tokens, fed_spans)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- serialization ---------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(params_to_bytes(self))

    @classmethod
    def load(cls, path) -> "RedPenNet":
        return params_from_bytes(Path(path).read_bytes())


def loss_fn(outputs: StepOutputs, target_tokens, target_spans, span_target_mask,
            span_weight: float = 1.0):
    """Token cross-entropy over non-PAD steps plus span cross-entropy over masked steps.

    Returns (total, token_loss, span_loss) as tensors.
    """
    mask = span_target_mask.bool()
    has_span = target_spans >= 0
    if not bool(mask.any()) and bool(has_span.any()):
        raise ModelError("span targets present but the span target mask is all zero")
    tok_logits = outputs.token_logits.reshape(-1, outputs.token_logits.shape[-1])
    tok_tgt = target_tokens.reshape(-1)
    zero = outputs.token_logits.sum() * 0.0
    if bool((tok_tgt != PAD).any()):
        tok_loss = F.cross_entropy(tok_logits, tok_tgt, ignore_index=PAD)
    else:
        tok_loss = zero
    if bool(mask.any()):
        span_loss = F.cross_entropy(outputs.span_logits[mask], target_spans[mask])
    else:
        span_loss = zero
    return tok_loss + span_weight * span_loss, tok_loss, span_loss


def params_to_bytes(model: RedPenNet) -> bytes:
    head = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(head)), head]
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def params_from_bytes(blob: bytes) -> RedPenNet:
    if blob[:4] != MAGIC:
        raise ModelError("not a parameter file")
    (n,) = struct.unpack_from("<I", blob, 4)
    cfg = ModelConfig(**json.loads(blob[8:8 + n].decode("utf-8")))
    model = RedPenNet(cfg)
    off = 8 + n
    state = {}
    for name, ref in model.state_dict().items():
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if tuple(shape) != tuple(ref.shape):
            raise ModelError(f"tensor {name}: file shape {shape}, expected {tuple(ref.shape)}")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(blob):
        raise ModelError("trailing bytes in parameter file")
    model.load_state_dict(state)
    return model


def gradient_check(model: RedPenNet, batch, epsilon: float = 1e-3, samples: int = 200,
                   seed: int = 0) -> float:
    """Max relative error between autograd and finite-difference gradients.

    ``batch`` is (x_ids, fed_tokens, fed_spans, target_tokens, target_spans,
    span_target_mask).  Uses a fourth-order central stencil in float64 with
    dropout off; tensors with more than ``samples`` entries are subsampled.
    """
    model = model.double().eval()
    x, ft, fs, tt, ts, sm = batch

    def objective():
        return loss_fn(model(x, ft, fs), tt, ts, sm)[0]

    model.zero_grad()
    objective().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.named_parameters():
        g = p.grad
        if g is None:
            g = torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise ModelError(f"non-finite gradient in {name}")
        flat = p.data.view(-1)
        gflat = g.view(-1)
        k = flat.numel()
        picks = range(k) if k <= samples else rng.choice(k, size=samples, replace=False)
        with torch.no_grad():
            for i in picks:
                i = int(i)
                orig = flat[i].item()
                vals = []
                for step in (2, 1, -1, -2):
                    flat[i] = orig + step * epsilon
                    vals.append(objective().item())
                flat[i] = orig
                num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * epsilon)
                ana = gflat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
