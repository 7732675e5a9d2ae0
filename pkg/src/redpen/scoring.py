"""Precision, recall and F-beta of proposed edits against gold annotations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

from .edits import Edit
from .m2 import M2Sentence, word_edits_to_subword
from .tokenizer import Vocabulary


def f_beta(p: float, r: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    denom = b2 * p + r
    if denom == 0:
        return 0.0
    return (1 + b2) * p * r / denom


@dataclass(frozen=True)
class Score:
    P: float
    R: float
    F: float
    beta: float
    sentences: int
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def report(self) -> dict:
        return {"P": self.P, "R": self.R, "F": self.F, "beta": self.beta,
                "sentences": self.sentences}

    def to_json(self) -> str:
        return json.dumps(self.report())

    def summary(self) -> str:
        return (f"P={self.P:.4f} R={self.R:.4f} F{self.beta:g}={self.F:.4f} "
                f"(tp={self.tp} fp={self.fp} fn={self.fn}, {self.sentences} sentences)")


def edit_key(e: Edit):
    return e.span_start, e.span_end, e.replacement


def string_key(decoder_vocab: Vocabulary) -> Callable[[Edit], tuple]:
    """Match on span plus the whitespace-normalized replacement text."""
    def key(e: Edit):
        return e.span_start, e.span_end, decoder_vocab.decode(e.replacement)
    return key


def _local_f(tp: int, fp: int, fn: int, beta: float) -> float:
    # sentence-level: nothing proposed counts as precise, nothing expected as recalled
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return f_beta(p, r, beta)


def _as_annotators(gold_sentence) -> Mapping[int, Sequence[Edit]]:
    if isinstance(gold_sentence, Mapping):
        return gold_sentence if gold_sentence else {0: []}
    return {0: gold_sentence}


def score(hyp_edits_per_sentence: Sequence[Sequence[Edit]], gold, beta: float = 0.5,
          key: Callable[[Edit], object] | None = None) -> Score:
    """Corpus P/R/F.

    ``gold`` holds one entry per sentence: either an edit list or a mapping
    annotator id -> edit list.  Each sentence is scored against the annotator
    giving it the best sentence-level F-beta.
    """
    if len(hyp_edits_per_sentence) != len(gold):
        raise ValueError(f"{len(hyp_edits_per_sentence)} hypothesis sentences "
                         f"but {len(gold)} gold sentences")
    key = key or edit_key
    TP = FP = FN = 0
    for hyp, g in zip(hyp_edits_per_sentence, gold):
        h = {key(e) for e in hyp}
        best = None
        for aid, edits in sorted(_as_annotators(g).items()):
            ref = {key(e) for e in edits}
            tp = len(h & ref)
            fp, fn = len(h) - tp, len(ref) - tp
            rank = (_local_f(tp, fp, fn, beta), tp, -(fp + fn), -aid)
            if best is None or rank > best[0]:
                best = (rank, tp, fp, fn)
        _, tp, fp, fn = best
        TP, FP, FN = TP + tp, FP + fp, FN + fn
    P = TP / (TP + FP) if TP + FP else 0.0
    R = TP / (TP + FN) if TP + FN else 0.0
    return Score(P, R, f_beta(P, R, beta), beta, len(gold), TP, FP, FN)


def gold_from_m2(sentences: Sequence[M2Sentence], encoder_vocab: Vocabulary,
                 decoder_vocab: Vocabulary) -> list[dict[int, list[Edit]]]:
    out = []
    for s in sentences:
        ids = s.annotator_ids() or [0]
        out.append({a: word_edits_to_subword(s, a, encoder_vocab, decoder_vocab) for a in ids})
    return out
