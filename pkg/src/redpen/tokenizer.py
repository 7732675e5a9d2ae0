"""Word-boundary BPE vocabularies for the encoder and the edit decoder.

Words are split on whitespace, spelled out as characters and closed with an
end-of-word symbol, then adjacent symbol pairs are merged greedily by
frequency.  Six special tokens always occupy ids 0..5.
"""
from __future__ import annotations

import heapq
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

PAD, SOS, EOS, SEP, DEL, UNK = range(6)
SPECIAL_ROLES = ("PAD", "SOS", "EOS", "SEP", "DEL", "UNK")
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<sep>", "<del>", "<unk>")
END_OF_WORD = "</w>"

HEADER = "redpen-bpe v1"


class VocabError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """BPE merge table plus special tokens.

    ``tokens`` is ordered as: the six specials, the base symbols (sorted), then
    one merged token per entry of ``merges``.
    """

    tokens: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    lowercase: bool = False
    token_to_id: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:6]) != SPECIAL_TOKENS:
            raise VocabError("special tokens must occupy ids 0..5 in fixed order")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise VocabError("duplicate token in vocabulary")
        object.__setattr__(self, "token_to_id", index)
        object.__setattr__(self, "_ranks", {p: r for r, p in enumerate(self.merges)})
        object.__setattr__(self, "_word_cache", {})

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (self.tokens, self.merges, self.lowercase) == (
            other.tokens, other.merges, other.lowercase)

    @property
    def specials(self) -> dict[str, int]:
        return dict(zip(SPECIAL_ROLES, range(6)))

    @property
    def base_symbols(self) -> tuple[str, ...]:
        return self.tokens[6:len(self.tokens) - len(self.merges)]

    # -- application ---------------------------------------------------------

    def tokenize_word(self, word: str) -> tuple[str, ...]:
        cache = self._word_cache
        if word in cache:
            return cache[word]
        symbols = [c if c in self.token_to_id else SPECIAL_TOKENS[UNK] for c in word]
        symbols.append(END_OF_WORD)
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                break
            symbols = _merge_pair(symbols, self.merges[best])
        out = tuple(symbols)
        if len(cache) < 200_000:
            cache[word] = out
        return out

    def tokenize(self, text: str) -> list[str]:
        if self.lowercase:
            text = text.lower()
        out: list[str] = []
        for word in text.split():
            out.extend(self.tokenize_word(word))
        return out

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id[t] for t in self.tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(self.id_to_token(i) for i in ids)

    def id_to_token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise VocabError(f"token id {i} out of range for vocabulary of size {len(self.tokens)}")
        if i < 6 and i != UNK:
            raise VocabError(f"special token in text position: id {i} ({SPECIAL_TOKENS[i]})")
        return self.tokens[i]

    # -- serialization -------------------------------------------------------

    def dumps(self) -> str:
        head = f"{HEADER} {len(self.tokens)}" + (" lowercase" if self.lowercase else "")
        lines = [head, *SPECIAL_TOKENS, *self.base_symbols]
        lines.extend(f"{a} {b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].split(" ") if lines else []
        if head[:2] != HEADER.split(" ") or len(head) not in (3, 4):
            raise VocabError(f"bad vocabulary header: {lines[0] if lines else ''!r}")
        size = int(head[2])
        lowercase = len(head) == 4 and head[3] == "lowercase"
        if tuple(lines[1:7]) != SPECIAL_TOKENS:
            raise VocabError("bad special token block")
        tokens = list(SPECIAL_TOKENS)
        merges = []
        for lineno, line in enumerate(lines[7:], start=8):
            parts = line.split(" ")
            if len(parts) == 1 and not merges:
                tokens.append(parts[0])
            elif len(parts) == 2:
                merges.append((parts[0], parts[1]))
                tokens.append(parts[0] + parts[1])
            else:
                raise VocabError(f"bad vocabulary entry at line {lineno}: {line!r}")
        if len(tokens) != size:
            raise VocabError(f"header declares {size} tokens, file has {len(tokens)}")
        return cls(tuple(tokens), tuple(merges), lowercase)

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_bytes().decode("utf-8"))


def detokenize(token_strings: Iterable[str]) -> str:
    text = "".join(token_strings).replace(END_OF_WORD, " ")
    return " ".join(text.split())


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def min_vocab_size(corpus: Sequence[str], lowercase: bool = False) -> int:
    return 6 + len(_base_symbols(_word_counts(corpus, lowercase)))


def _word_counts(corpus: Iterable[str], lowercase: bool) -> Counter:
    counts: Counter = Counter()
    for line in corpus:
        counts.update((line.lower() if lowercase else line).split())
    return counts


def _base_symbols(words: Counter) -> list[str]:
    chars = {c for w in words for c in w}
    return sorted(chars) + [END_OF_WORD] if words else []


def train_bpe(corpus: Sequence[str], target_size: int, lowercase: bool = False) -> Vocabulary:
    """Learn a BPE vocabulary of at most ``target_size`` tokens.

    The most frequent adjacent pair is merged first; equal counts go to the
    lexicographically smallest pair.  Pairs whose concatenation collides with
    an existing token are never merged.
    """
    words = _word_counts(corpus, lowercase)
    if not words:
        raise VocabError("empty corpus")
    base = _base_symbols(words)
    minimum = 6 + len(base)
    if target_size < minimum:
        raise VocabError(f"target_size {target_size} below minimum {minimum} "
                         f"(6 specials + {len(base)} base symbols)")

    tokens = list(SPECIAL_TOKENS) + base
    known = set(tokens)
    vocab_words = [list(w) + [END_OF_WORD] for w in words]
    freqs = list(words.values())

    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, sym in enumerate(vocab_words):
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += freqs[idx]
            where[pair].add(idx)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while len(tokens) < target_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or -neg <= 0:
            continue
        merged = pair[0] + pair[1]
        if merged in known:
            pair_counts.pop(pair)
            continue
        merges.append(pair)
        tokens.append(merged)
        known.add(merged)

        touched: set[tuple[str, str]] = set()
        for idx in list(where[pair]):
            sym = vocab_words[idx]
            f = freqs[idx]
            for p in zip(sym, sym[1:]):
                pair_counts[p] -= f
                touched.add(p)
            new = _merge_pair(sym, pair)
            vocab_words[idx] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(idx)
                touched.add(p)
        pair_counts.pop(pair, None)
        where.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            elif p in pair_counts:
                del pair_counts[p]
    return Vocabulary(tuple(tokens), tuple(merges), lowercase)


@dataclass(frozen=True)
class VocabStats:
    mean: float
    std: float
    histogram: dict[int, int]

    @property
    def count(self) -> int:
        return sum(self.histogram.values())


def vocab_stats(concatenated_corrections: Sequence[str], vocab: Vocabulary) -> VocabStats:
    """Token-count distribution of correction strings under ``vocab``."""
    if not concatenated_corrections:
        raise VocabError("vocab_stats needs at least one sequence")
    hist = Counter(len(vocab.encode(s)) for s in concatenated_corrections)
    n = sum(hist.values())
    mean = sum(k * c for k, c in hist.items()) / n
    var = sum(c * (k - mean) ** 2 for k, c in hist.items()) / n
    return VocabStats(mean, math.sqrt(var), dict(sorted(hist.items())))


def presoftmax_flops(model_dim: int, vocab_size: int) -> int:
    """Multiply count of the output projection for one decoding step."""
    if model_dim <= 0 or vocab_size <= 0:
        raise ValueError("model_dim and vocab_size must be positive")
    return model_dim * vocab_size


def read_lines(path) -> list[str]:
    text = Path(path).read_bytes().decode("utf-8")
    return [ln for ln in text.split("\n") if ln.strip()]
