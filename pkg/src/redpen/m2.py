"""Reading and writing m2 annotation files.

An m2 block is one ``S`` line with the whitespace-tokenized source followed
by ``A`` lines::

    A start end|||type|||correction|||REQUIRED|||-NONE-|||annotator

Offsets count whitespace-separated words.  ``-1 -1`` marks a noop annotation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .edits import Edit
from .tokenizer import EOS, SOS, Vocabulary


class M2Error(ValueError):
    pass


@dataclass(frozen=True)
class M2Annotation:
    start_word: int
    end_word: int
    error_type: str
    correction: str
    annotator_id: int = 0
    # fields between the correction and the annotator id, kept verbatim
    extra: tuple[str, ...] = ("REQUIRED", "-NONE-")

    @property
    def is_noop(self) -> bool:
        return self.start_word == -1 and self.end_word == -1

    def to_line(self) -> str:
        fields = [f"{self.start_word} {self.end_word}", self.error_type, self.correction,
                  *self.extra, str(self.annotator_id)]
        return "A " + "|||".join(fields)


@dataclass
class M2Sentence:
    source_words: list[str]
    annotations: list[M2Annotation] = field(default_factory=list)

    @property
    def source(self) -> str:
        return " ".join(self.source_words)

    def annotator_ids(self) -> list[int]:
        return sorted({a.annotator_id for a in self.annotations})

    def by_annotator(self, annotator_id: int) -> list[M2Annotation]:
        return [a for a in self.annotations if a.annotator_id == annotator_id]


def _parse_annotation(line: str, lineno: int) -> M2Annotation:
    fields = line[2:].split("|||")
    if len(fields) < 4:
        raise M2Error(f"malformed annotation at line {lineno}: {line[:40]!r}")
    span = fields[0].split()
    try:
        start, end = int(span[0]), int(span[1])
        annotator = int(fields[-1])
    except (ValueError, IndexError):
        raise M2Error(f"malformed annotation at line {lineno}: {line[:40]!r}") from None
    if len(span) != 2:
        raise M2Error(f"malformed annotation at line {lineno}: {line[:40]!r}")
    if end < start:
        raise M2Error(f"end before start at line {lineno}")
    if start < -1 or (start == -1) != (end == -1):
        raise M2Error(f"bad offsets at line {lineno}: {line[:40]!r}")
    return M2Annotation(start, end, fields[1], fields[2], annotator, tuple(fields[3:-1]))


def parse_m2(text: str) -> list[M2Sentence]:
    sentences: list[M2Sentence] = []
    current: M2Sentence | None = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip()
        if not line:
            current = None
            continue
        if line.startswith("S ") or line == "S":
            if current is not None:
                raise M2Error(f"source line inside a block at line {lineno}: {line[:40]!r}")
            current = M2Sentence(line[2:].split())
            sentences.append(current)
        elif line.startswith("A "):
            if current is None:
                raise M2Error(f"annotation without source at line {lineno}: {line[:40]!r}")
            ann = _parse_annotation(line, lineno)
            if ann.end_word > len(current.source_words):
                raise M2Error(f"offset beyond sentence length at line {lineno}")
            current.annotations.append(ann)
        else:
            raise M2Error(f"malformed line {lineno}: {line[:40]!r}")
    return sentences


def write_m2(sentences) -> str:
    blocks = []
    for s in sentences:
        lines = ["S " + s.source] + [a.to_line() for a in s.annotations]
        blocks.append("\n".join(lines))
    return "".join(b + "\n\n" for b in blocks)


def read_m2(path) -> list[M2Sentence]:
    return parse_m2(Path(path).read_bytes().decode("utf-8"))


def concat_corrections(sentence: M2Sentence, annotator_id: int | None = None) -> str:
    """Space-join the correction strings of one annotator (or all, if None)."""
    if annotator_id is None:
        anns = sentence.annotations
    else:
        if sentence.annotations and annotator_id not in sentence.annotator_ids():
            raise M2Error(f"unknown annotator {annotator_id}")
        anns = sentence.by_annotator(annotator_id)
    parts = [a.correction for a in anns if not a.is_noop and a.correction]
    return " ".join(parts)


def select_annotator(sentence: M2Sentence, policy: str = "first") -> int | list[int]:
    """Pick the annotator whose edits become the training target.

    ``"first"`` returns the smallest id; ``"all"`` returns every id so the caller
    can emit one training pair per annotator.
    """
    ids = sentence.annotator_ids() or [0]
    if policy == "first":
        return ids[0]
    if policy == "all":
        return ids
    raise ValueError(f"unknown annotator policy {policy!r}")


def encoder_ids(source_words: list[str], encoder_vocab: Vocabulary) -> list[int]:
    """SOS + subword ids + EOS; spans index into this sequence."""
    return [SOS] + encoder_vocab.encode(" ".join(source_words)) + [EOS]


def word_boundaries(source_words: list[str], encoder_vocab: Vocabulary) -> list[int]:
    """Encoder position of each word boundary; position 0 holds SOS."""
    bounds = [1]
    for w in source_words:
        bounds.append(bounds[-1] + len(encoder_vocab.encode(w)))
    return bounds


def word_edits_to_subword(sentence: M2Sentence, annotator_id: int,
                          encoder_vocab: Vocabulary, decoder_vocab: Vocabulary) -> list[Edit]:
    bounds = word_boundaries(sentence.source_words, encoder_vocab)
    out = []
    for a in sentence.by_annotator(annotator_id):
        if a.is_noop:
            continue
        if a.end_word > len(sentence.source_words):
            raise M2Error(f"word offset {a.end_word} beyond sentence length "
                          f"{len(sentence.source_words)}")
        out.append(Edit(bounds[a.start_word], bounds[a.end_word],
                        tuple(decoder_vocab.encode(a.correction))))
    out.sort(key=lambda e: (e.span_start, e.span_end))
    return out
