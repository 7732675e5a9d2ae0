"""Edit lists, the flat (token, span) edit stream, and how to apply them.

A stream opens every edit with SEP carrying the start position; the next
token carries the end position; further replacement tokens carry no span.
Positions are half-open indices into the SOS-prefixed encoder sequence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .tokenizer import DEL, EOS, PAD, SEP, SOS


class EditError(ValueError):
    pass


@dataclass(frozen=True)
class Edit:
    span_start: int
    span_end: int
    replacement: tuple[int, ...] = ()
    probability: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "replacement", tuple(self.replacement))
        if self.span_start < 0 or self.span_end < self.span_start:
            raise EditError(f"invalid span ({self.span_start}, {self.span_end})")

    @property
    def is_insertion(self) -> bool:
        return self.span_start == self.span_end

    @property
    def is_deletion(self) -> bool:
        return not self.replacement

    @property
    def key(self) -> tuple[int, int, tuple[int, ...]]:
        return self.span_start, self.span_end, self.replacement

    def with_probability(self, p: float | None) -> "Edit":
        return Edit(self.span_start, self.span_end, self.replacement, p)


@dataclass
class EditStream:
    tokens: list[int]
    spans: list[int | None]
    # per step (token probability, span probability or None)
    probs: list[tuple[float, float | None]] | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        rec = {"tokens": list(self.tokens), "spans": list(self.spans)}
        rec["probs"] = None if self.probs is None else [list(p) for p in self.probs]
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "EditStream":
        probs = rec.get("probs")
        if probs is not None:
            probs = [(float(tp), None if sp is None else float(sp)) for tp, sp in probs]
        return cls(list(rec["tokens"]), list(rec["spans"]), probs)


@dataclass(frozen=True)
class Violation:
    rule: str
    step: int  # 1-based autoregressive step
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule} at step {self.step}" + (f": {self.detail}" if self.detail else "")


def check_sorted(edits: Sequence[Edit]) -> None:
    """Raise unless edits are sorted by span and mutually non-overlapping."""
    prev = None
    for e in edits:
        if prev is not None:
            if (e.span_start, e.span_end) < (prev.span_start, prev.span_end):
                raise EditError(f"edits not sorted: {prev} before {e}")
            if e.span_start < prev.span_end:
                raise EditError(f"overlapping edits: {prev} and {e}")
        prev = e


def edits_to_stream(edits: Sequence[Edit]) -> EditStream:
    check_sorted(edits)
    tokens: list[int] = []
    spans: list[int | None] = []
    for e in edits:
        tokens.append(SEP)
        spans.append(e.span_start)
        body = list(e.replacement) or [DEL]
        tokens.extend(body)
        spans.append(e.span_end)
        spans.extend([None] * (len(body) - 1))
    tokens.append(EOS)
    spans.append(None)
    return EditStream(tokens, spans)


def edit_probability(token_probs: Sequence[float], start_prob: float, end_prob: float,
                     include_sep: bool = True) -> float:
    """Mean of an edit's token probabilities and its two span probabilities.

    ``token_probs`` starts with the SEP step; it is dropped when
    ``include_sep`` is false.
    """
    if start_prob is None or end_prob is None or any(p is None for p in token_probs):
        raise EditError("missing step probability")
    toks = list(token_probs) if include_sep else list(token_probs[1:])
    values = toks + [start_prob, end_prob]
    return sum(values) / len(values)


def stream_to_edits(stream: EditStream, include_sep: bool = True) -> list[Edit]:
    violations = validate_stream(stream)
    if violations:
        raise EditError("invalid stream: " + "; ".join(map(str, violations)))
    return _collect_edits(stream, include_sep)


def _collect_edits(stream: EditStream, include_sep: bool = True) -> list[Edit]:
    out = []
    toks, spans, probs = stream.tokens, stream.spans, stream.probs
    n = 0
    while n < len(toks) and toks[n] != EOS:
        if toks[n] != SEP:
            n += 1
            continue
        start, end = spans[n], spans[n + 1]
        m = n + 1
        body = []
        while m < len(toks) and toks[m] not in (SEP, EOS):
            if toks[m] != DEL:
                body.append(toks[m])
            m += 1
        p = None
        if probs is not None:
            p = edit_probability([probs[k][0] for k in range(n, m)],
                                 probs[n][1], probs[n + 1][1], include_sep)
        out.append(Edit(start, end, tuple(body), p))
        n = m
    return out


def validate_stream(stream: EditStream) -> list[Violation]:
    """List every broken stream rule; an empty list means the stream is valid."""
    toks, spans = stream.tokens, stream.spans
    out: list[Violation] = []
    if len(toks) != len(spans):
        return [Violation("length-mismatch", 0, f"{len(toks)} tokens, {len(spans)} spans")]
    if not toks or toks[-1] != EOS:
        out.append(Violation("missing-eos", len(toks)))
    last_start = None
    last_end = None
    for i, t in enumerate(toks):
        step = i + 1
        prev = toks[i - 1] if i else None
        if t == EOS and i != len(toks) - 1:
            out.append(Violation("early-eos", step))
        if t in (PAD, SOS):
            out.append(Violation("special-token", step, f"token id {t}"))
        if t == SEP and prev == SEP:
            out.append(Violation("adjacent-sep", step))
        if t == DEL and prev != SEP:
            out.append(Violation("misplaced-del", step))
        needs_span = t == SEP or prev == SEP
        if needs_span and spans[i] is None:
            out.append(Violation("missing-span", step))
            continue
        if t == SEP:
            if i + 1 >= len(toks) or toks[i + 1] == EOS:
                out.append(Violation("empty-edit", step))
            s = spans[i]
            if last_start is not None and s < last_start:
                out.append(Violation("non-monotonic-span", step, f"{s} after {last_start}"))
            elif last_end is not None and s < last_end:
                out.append(Violation("overlapping-edit", step, f"{s} before {last_end}"))
            last_start = s
        elif prev == SEP and t != SEP:
            if last_start is not None and spans[i] < last_start:
                out.append(Violation("span-end-before-start", step,
                                     f"{spans[i]} < {last_start}"))
            last_end = spans[i]
    return out


def stream_replacements(stream: EditStream) -> list[tuple[int, int, list[int]]]:
    """Run the editsToCorrect loop and return each flushed (start, end, z).

    The pending buffer is also flushed when EOS (or the end of a truncated
    stream) is reached; as printed, the loop would drop the last edit.
    """
    out = []
    s_start = s_end = 0
    z: list[int] = []
    toks, spans = stream.tokens, stream.spans
    for n, t in enumerate(toks):
        if t == EOS:
            break
        if t == SEP:
            out.append((s_start, s_end, z))
            z = []
            s_start = spans[n]
        else:
            if t != DEL:
                z = z + [t]
            if n > 0 and toks[n - 1] == SEP:
                s_end = spans[n]
    out.append((s_start, s_end, z))
    # the initial (0, 0, []) flush is a no-op insertion of nothing
    return [(s, e, z) for s, e, z in out if z or s != e]


def apply_edits(source_tokens: Sequence, edits: "Sequence[Edit] | EditStream") -> list:
    """Splice edits into ``source_tokens``.

    Offsets always refer to the original source, so earlier edits never shift
    later ones.  Works for any token type; replacement items are inserted as-is.
    """
    if isinstance(edits, EditStream):
        reps = stream_replacements(edits)
    else:
        reps = [(e.span_start, e.span_end, list(e.replacement)) for e in edits]
    n = len(source_tokens)
    out = []
    pos = 0
    for s, e, z in reps:
        if s is None or e is None:
            raise EditError("edit without span")
        if e < s:
            raise EditError(f"span end {e} before start {s}")
        if e > n or s < 0:
            raise EditError(f"span ({s}, {e}) out of range for source of length {n}")
        if s < pos:
            raise EditError(f"edit at ({s}, {e}) overlaps a previous edit ending at {pos}")
        out.extend(source_tokens[pos:s])
        out.extend(z)
        pos = e
    out.extend(source_tokens[pos:])
    return out


def extract_edits(source_tokens: Sequence, target_tokens: Sequence) -> list[Edit]:
    """Minimal edit script between two sequences, one edit per run of changes."""
    src, tgt = list(source_tokens), list(target_tokens)
    n, m = len(src), len(tgt)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, up = dist[i], dist[i - 1]
        a = src[i - 1]
        for j in range(1, m + 1):
            diag = up[j - 1] + (a != tgt[j - 1])
            row[j] = min(diag, up[j] + 1, row[j - 1] + 1)

    # backtrace: prefer diagonal, then deletion, then insertion
    ops = []
    i, j = n, m
    while i or j:
        if i and j and dist[i][j] == dist[i - 1][j - 1] + (src[i - 1] != tgt[j - 1]):
            ops.append("M" if src[i - 1] == tgt[j - 1] else "S")
            i, j = i - 1, j - 1
        elif i and dist[i][j] == dist[i - 1][j] + 1:
            ops.append("D")
            i -= 1
        else:
            ops.append("I")
            j -= 1
    ops.reverse()

    edits = []
    i = j = 0
    run = None
    for op in ops + ["M"]:
        if op == "M":
            if run is not None:
                edits.append(Edit(run[0], i, tuple(tgt[run[1]:j])))
                run = None
            i, j = i + 1, j + 1
            continue
        if run is None:
            run = (i, j)
        if op in ("S", "D"):
            i += 1
        if op in ("S", "I"):
            j += 1
    return edits


# -- JSONL ---------------------------------------------------------------------

def edit_to_json(e: Edit) -> dict:
    return {"start": e.span_start, "end": e.span_end,
            "replacement": list(e.replacement), "prob": e.probability}


def edit_from_json(rec: dict) -> Edit:
    return Edit(int(rec["start"]), int(rec["end"]), tuple(rec.get("replacement", ())),
                rec.get("prob"))


def record_to_edits(rec: dict) -> list[Edit]:
    """Accept either an ``{"edits": [...]}`` record or a stream record."""
    if "edits" in rec:
        return [edit_from_json(e) for e in rec["edits"]]
    return stream_to_edits(EditStream.from_json(rec))


def dump_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def load_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.split("\n") if line.strip()]
