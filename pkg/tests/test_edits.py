import time
from functools import lru_cache

import pytest
from hypothesis import given, settings, strategies as st

from redpen.edits import (Edit, EditError, EditStream, apply_edits, dump_jsonl, edits_to_stream,
                          extract_edits, load_jsonl, record_to_edits, stream_to_edits,
                          validate_stream)
from redpen.tokenizer import DEL, EOS, SEP

ON, THE, COMMA = 100, 101, 102
TABLE2_EDITS = [Edit(1, 3, (ON, THE)), Edit(5, 5, (COMMA,)), Edit(6, 7, ())]
TABLE2_TOKENS = [SEP, ON, THE, SEP, COMMA, SEP, DEL, EOS]
TABLE2_SPANS = [1, 3, None, 5, 5, 6, 7, None]


def test_table2_stream():
    s = edits_to_stream(TABLE2_EDITS)
    assert s.tokens == TABLE2_TOKENS
    assert s.spans == TABLE2_SPANS
    assert validate_stream(s) == []
    assert stream_to_edits(s) == TABLE2_EDITS


def test_empty_and_single_insertion():
    s = edits_to_stream([])
    assert (s.tokens, s.spans) == ([EOS], [None])
    assert stream_to_edits(s) == []
    s = edits_to_stream([Edit(4, 4, (9,))])
    assert (s.tokens, s.spans) == ([SEP, 9, EOS], [4, 4, None])
    assert stream_to_edits(s) == [Edit(4, 4, (9,))]


def test_overlap_rejected():
    with pytest.raises(EditError, match="overlapping"):
        edits_to_stream([Edit(1, 3, (9,)), Edit(2, 4, (9,))])


def test_table1_sentence(table1_source):
    stream = EditStream(["<sep>", "On", "the", "<sep>", ",", "<sep>", DEL, EOS], TABLE2_SPANS)
    stream.tokens[0] = stream.tokens[3] = stream.tokens[5] = SEP
    out = apply_edits(table1_source, stream)
    assert " ".join(out) == "<sos> On the other hand , many stars sold their privacy to earn more and more money ."
    assert apply_edits(table1_source, [Edit(1, 3, ("On", "the")), Edit(5, 5, (",",)), Edit(6, 7, ())]) == out


def test_unflushed_algorithm_would_drop_deletion(table1_source):
    # without the EOS flush the (6, 7) deletion of "of" would be lost
    out = apply_edits(table1_source, edits_to_stream([Edit(6, 7, ())]))
    assert "of" not in out


def test_apply_basics():
    assert apply_edits([1, 7, 8], []) == [1, 7, 8]
    assert apply_edits([1, 7, 8], [Edit(1, 3, ())]) == [1]
    assert apply_edits([1, 7], EditStream([EOS], [None])) == [1, 7]
    with pytest.raises(EditError, match="out of range"):
        apply_edits([1, 7], [Edit(1, 5, ())])
    with pytest.raises(EditError, match="before start"):
        apply_edits([1, 7], EditStream([SEP, 9, EOS], [2, 1, None]))


def test_extract_examples():
    a, b, c, x = 10, 11, 12, 13
    assert extract_edits([1, a, b, c], [1, a, x, c]) == [Edit(2, 3, (x,))]
    assert extract_edits([1, a, b], [1, a, b]) == []
    assert extract_edits([1, a], [1, a, b, c]) == [Edit(2, 2, (b, c))]


@lru_cache(maxsize=None)
def brute_distance(s, t):
    if not s:
        return len(t)
    if not t:
        return len(s)
    return min(brute_distance(s[1:], t) + 1, brute_distance(s, t[1:]) + 1,
               brute_distance(s[1:], t[1:]) + (s[0] != t[0]))


seqs = st.lists(st.integers(10, 14), max_size=7)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_extract_is_minimal_and_applies(s, t):
    src, tgt = [1] + s, [1] + t
    edits = extract_edits(src, tgt)
    assert apply_edits(src, edits) == tgt
    # each merged run costs its own minimal alignment; total equals the global optimum
    cost = sum(brute_distance(tuple(src[e.span_start:e.span_end]), e.replacement) for e in edits)
    assert cost == brute_distance(tuple(src), tuple(tgt))
    for e, f in zip(edits, edits[1:]):
        assert e.span_end < f.span_start or (e.span_end <= f.span_start and not (e.is_insertion and f.is_insertion))
    for e in edits:
        assert list(e.replacement) != src[e.span_start:e.span_end]


@st.composite
def edit_lists(draw):
    n = draw(st.integers(1, 20))
    edits, pos = [], 1
    for _ in range(draw(st.integers(0, 5))):
        start = draw(st.integers(pos, n))
        end = draw(st.integers(start, n))
        rep = tuple(draw(st.lists(st.integers(6, 30), min_size=0 if end > start else 1, max_size=3)))
        if edits and edits[-1].is_insertion and start == end == edits[-1].span_start:
            continue
        edits.append(Edit(start, end, rep))
        pos = end if end > start else end + 1
        if pos > n:
            break
    return n, edits


@settings(max_examples=300, deadline=None)
@given(edit_lists())
def test_stream_roundtrip_and_equivalence(case):
    n, edits = case
    stream = edits_to_stream(edits)
    assert validate_stream(stream) == []
    assert stream_to_edits(stream) == edits
    src = list(range(100, 100 + n + 1))
    assert apply_edits(src, stream) == apply_edits(src, edits)


def test_validate_adjacent_sep():
    v = validate_stream(EditStream([SEP, SEP, EOS], [1, 2, None]))
    assert "adjacent-sep at step 2" in [str(x) for x in v]


def test_validate_non_monotonic():
    v = validate_stream(EditStream([SEP, 9, SEP, 9, EOS], [5, 5, 3, 3, None]))
    assert [x.rule for x in v] == ["non-monotonic-span"]
    assert v[0].step == 3


def test_validate_other_rules():
    rules = lambda toks, spans: {x.rule for x in validate_stream(EditStream(toks, spans))}
    assert "missing-eos" in rules([SEP, 9], [1, 1])
    assert "missing-span" in rules([SEP, 9, EOS], [1, None, None])
    assert "span-end-before-start" in rules([SEP, 9, EOS], [4, 2, None])
    assert "empty-edit" in rules([SEP, EOS], [1, None])
    assert rules([SEP, 9, 9, EOS], [1, 2, 7, None]) == set()  # non-span positions ignored


def test_jsonl_roundtrip():
    s = edits_to_stream(TABLE2_EDITS)
    s.probs = [(0.9, 0.8)] * len(s.tokens)
    text = dump_jsonl([s.to_json()])
    (rec,) = load_jsonl(text)
    assert rec["spans"][2] is None
    got = record_to_edits(rec)
    assert [e.key for e in got] == [e.key for e in TABLE2_EDITS]
    # mean over SEP, replacement tokens and the two span steps
    assert [e.probability for e in got] == pytest.approx([4.3 / 5, 0.85, 0.85])


def test_apply_is_fast(table1_source):
    edits = [Edit(1, 3, ("On", "the")), Edit(5, 5, (",",)), Edit(6, 7, ())]
    stream = edits_to_stream(edits)
    t = time.perf_counter()
    apply_edits(table1_source, stream)
    assert time.perf_counter() - t < 1e-3
