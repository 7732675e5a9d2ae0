"""Greedy edit-stream decoding, edit scoring, filtering and iterative correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .edits import (Edit, EditError, EditStream, Violation, _collect_edits, apply_edits,
                    edit_probability, edit_to_json, validate_stream)
from .model import RedPenNet
from .tokenizer import EOS, SEP, SOS, Vocabulary, detokenize

__all__ = ["DecodeResult", "greedy_decode", "greedy_decode_batch", "edit_probability",
           "filter_edits", "correct", "correct_ids"]


@dataclass
class DecodeResult:
    stream: EditStream
    edits: list[Edit]
    violations: list[Violation] = field(default_factory=list)
    truncated: bool = False

    def to_json(self) -> dict:
        return {"stream": self.stream.to_json(),
                "edits": [edit_to_json(e) for e in self.edits],
                "violations": [str(v) for v in self.violations],
                "truncated": self.truncated}


def _finish(tokens, spans, probs, include_sep: bool) -> DecodeResult:
    stream = EditStream(tokens, spans, probs)
    violations = validate_stream(stream)
    truncated = not tokens or tokens[-1] != EOS
    edits: list[Edit] = []
    if not violations:
        edits = _collect_edits(stream, include_sep)
    elif truncated:
        # keep edits closed by a following SEP; the trailing one may be partial
        seps = [i for i, t in enumerate(tokens) if t == SEP]
        if len(seps) >= 2:
            cut = seps[-1]
            prefix = EditStream(tokens[:cut] + [EOS], spans[:cut] + [None],
                                probs[:cut] + [(1.0, None)])
            if not validate_stream(prefix):
                edits = _collect_edits(prefix, include_sep)
    return DecodeResult(stream, edits, violations, truncated)


@torch.no_grad()
def greedy_decode_batch(model: RedPenNet, sources: Sequence[Sequence[int]],
                        max_steps: int | None = None, constrained: bool = False,
                        include_sep: bool = True) -> list[DecodeResult]:
    """Argmax decoding of a batch of SOS-prefixed sources.

    A span is read at SEP steps and at the step right after a SEP.  With
    ``constrained`` the span argmax is limited to positions not left of the
    previous span.
    """
    model.eval()
    max_steps = max_steps or model.cfg.max_tgt_len
    max_steps = min(max_steps, model.cfg.max_tgt_len)
    B = len(sources)
    L = max(len(s) for s in sources)
    x = torch.zeros((B, L), dtype=torch.long)
    for b, s in enumerate(sources):
        x[b, :len(s)] = torch.tensor(list(s))
    lengths = torch.tensor([len(s) for s in sources])
    enc, x_emb = model.encode_source(x)
    fed_t = torch.full((B, 1), SOS, dtype=torch.long)
    fed_s = torch.zeros((B, 1), dtype=torch.long)
    toks = [[] for _ in range(B)]
    spans = [[] for _ in range(B)]
    probs = [[] for _ in range(B)]
    done = [False] * B
    floor = [0] * B
    positions = torch.arange(L)
    for _ in range(max_steps):
        out = model.decode_states(enc, x_emb, x, fed_t, fed_s)
        tp = torch.softmax(out.token_logits[:, -1].float(), dim=-1)
        tok_p, tok = tp.max(dim=-1)
        span_logits = out.span_logits[:, -1].float()
        new_t = torch.zeros(B, dtype=torch.long)
        new_s = torch.full((B,), -1, dtype=torch.long)
        for b in range(B):
            if done[b]:
                continue
            t = int(tok[b])
            need_span = t == SEP or (toks[b] and toks[b][-1] == SEP)
            s, sp = None, None
            if need_span:
                logits = span_logits[b]
                if constrained:
                    logits = logits.masked_fill(positions < floor[b], float("-inf"))
                logits = logits.masked_fill(positions >= lengths[b], float("-inf"))
                dist = torch.softmax(logits, dim=-1)
                sp_t, s_t = dist.max(dim=-1)
                s, sp = int(s_t), float(sp_t)
                floor[b] = s
            toks[b].append(t)
            spans[b].append(s)
            probs[b].append((float(tok_p[b]), sp))
            new_t[b] = t
            new_s[b] = -1 if s is None else s
            if t == EOS:
                done[b] = True
        if all(done):
            break
        fed_t = torch.cat([fed_t, new_t[:, None]], dim=1)
        fed_s = torch.cat([fed_s, new_s[:, None]], dim=1)
    return [_finish(toks[b], spans[b], probs[b], include_sep) for b in range(B)]


def greedy_decode(model: RedPenNet, x_ids: Sequence[int], max_steps: int | None = None,
                  constrained: bool = False, include_sep: bool = True) -> DecodeResult:
    return greedy_decode_batch(model, [x_ids], max_steps, constrained, include_sep)[0]


def filter_edits(edits: Sequence[Edit], min_edit_prob: float) -> list[Edit]:
    """Keep edits whose probability is at least ``min_edit_prob``."""
    for e in edits:
        if e.probability is None:
            raise EditError(f"edit without probability: {e}")
    return [e for e in edits if e.probability >= min_edit_prob]


def propose(models: Sequence[RedPenNet], sources: Sequence[Sequence[int]],
            max_steps: int | None = None, constrained: bool = False,
            merge_mode: str = "sum"):
    """Decode every source with every model; merge when there are several.

    Returns (edit lists, per-model DecodeResult lists).
    """
    from .ensemble import merge

    per_model = [greedy_decode_batch(m, sources, max_steps, constrained) for m in models]
    if len(models) == 1:
        edit_lists = [r.edits for r in per_model[0]]
    else:
        edit_lists = [merge([res[i].edits for res in per_model], mode=merge_mode)
                      for i in range(len(sources))]
    return edit_lists, per_model


def _as_models(params_or_ensemble) -> list[RedPenNet]:
    if isinstance(params_or_ensemble, RedPenNet):
        return [params_or_ensemble]
    return list(params_or_ensemble)


def correct_ids(params_or_ensemble, x_ids: Sequence[int], thresholds: Sequence[float],
                max_steps: int | None = None, audit: list | None = None) -> list[int]:
    """Iterative correction when encoder and decoder share token ids."""
    if not thresholds:
        raise ValueError("need at least one round threshold")
    models = _as_models(params_or_ensemble)
    current = list(x_ids)
    for r, threshold in enumerate(thresholds):
        edit_lists, per_model = propose(models, [current], max_steps)
        kept = filter_edits(edit_lists[0], threshold)
        if audit is not None:
            audit.append(_audit_record(r, current, per_model, kept))
        if not kept:
            break
        current = apply_edits(current, kept)
    return current


def correct(params_or_ensemble, text: str, thresholds: Sequence[float],
            encoder_vocab: Vocabulary, decoder_vocab: Vocabulary,
            max_steps: int | None = None, audit: list | None = None) -> str:
    """Correct ``text`` over ``len(thresholds)`` rounds, stopping early on no edits."""
    if not thresholds:
        raise ValueError("need at least one round threshold")
    models = _as_models(params_or_ensemble)
    for r, threshold in enumerate(thresholds):
        x = [SOS] + encoder_vocab.encode(text) + [EOS]
        edit_lists, per_model = propose(models, [x], max_steps)
        kept = filter_edits(edit_lists[0], threshold)
        if audit is not None:
            audit.append(_audit_record(r, x, per_model, kept, text))
        if not kept:
            break
        pieces = ["<sos>"] + [encoder_vocab.tokens[i] for i in x[1:-1]] + ["<eos>"]
        swapped = [Edit(e.span_start, e.span_end,
                        tuple(decoder_vocab.id_to_token(t) for t in e.replacement))
                   for e in kept]
        text = detokenize(apply_edits(pieces, swapped)[1:-1])
    return text


def _audit_record(round_no, x, per_model, kept, text=None) -> dict:
    rec = {"round": round_no, "source_ids": list(x),
           "results": [res[0].to_json() for res in per_model],
           "kept": [edit_to_json(e) for e in kept]}
    if text is not None:
        rec["text"] = text
    return rec
