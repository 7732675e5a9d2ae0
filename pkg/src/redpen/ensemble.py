"""Merging edit lists from several models and tuning the acceptance threshold."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from typing import Sequence

from .decode import filter_edits
from .edits import Edit, EditError
from .scoring import score


def intersects(a: Edit, b: Edit) -> bool:
    """Half-open overlap; insertions conflict with spans strictly around them
    and with other insertions at the same point."""
    a_ins, b_ins = a.is_insertion, b.is_insertion
    if a_ins and b_ins:
        return a.span_start == b.span_start
    if a_ins:
        return b.span_start < a.span_start < b.span_end
    if b_ins:
        return a.span_start < b.span_start < a.span_end
    return a.span_start < b.span_end and b.span_start < a.span_end


def _priority(e: Edit):
    # most probable first; ties: leftmost, then shortest, then smallest replacement
    return (-e.probability, e.span_start, e.span_end - e.span_start, e.replacement)


def merge(per_model_edits: Sequence[Sequence[Edit]], mode: str = "sum") -> list[Edit]:
    """Combine per-model edit lists for one sentence.

    Identical edits are collapsed with their probabilities summed (``mode="mean"``
    divides by the number of models instead); of intersecting edits only the
    most probable survives; everything else is kept.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown merge mode {mode!r}")
    pooled: dict[tuple, list[float]] = defaultdict(list)
    for m, edits in enumerate(per_model_edits):
        for i, e in enumerate(edits):
            if e.probability is None:
                raise EditError(f"model {m}: edit without probability: {e}")
            for other in edits[i + 1:]:
                if intersects(e, other) or other.key == e.key:
                    raise EditError(f"model {m}: internal overlap between {e} and {other}")
            pooled[e.key].append(e.probability)
    n_models = max(len(per_model_edits), 1)
    candidates = []
    for (s, t, rep), ps in pooled.items():
        p = math.fsum(ps)
        if mode == "mean":
            p /= n_models
        candidates.append(Edit(s, t, rep, p))
    kept: list[Edit] = []
    for e in sorted(candidates, key=_priority):
        if not any(intersects(e, k) for k in kept):
            kept.append(e)
    kept.sort(key=lambda e: (e.span_start, e.span_end, e.replacement))
    for a, b in zip(kept, kept[1:]):
        if intersects(a, b):
            raise AssertionError(f"merge produced intersecting edits {a} and {b}")
    return kept


def threshold_grid(max_prob: float, step: float = 0.005) -> list[float]:
    """0, step, 2*step, ... up to the first point strictly above ``max_prob``."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    k_max = int(math.floor(max_prob / step + 1e-9)) + 1
    return [round(k * step, 10) for k in range(k_max + 1)]


def tune_threshold(merged_dev_outputs: Sequence[Sequence[Edit]], gold, grid_step: float = 0.005,
                   beta: float = 0.5, key=None, csv_path=None):
    """Grid-search the minimum edit probability that maximizes F-beta.

    Returns (best threshold, best F, rows of (threshold, P, R, F)).  The
    smallest maximizer wins; when nothing scores above zero the first grid
    point above every probability (accept nothing) is returned.
    """
    if not merged_dev_outputs:
        raise ValueError("empty dev set")
    probs = [e.probability for edits in merged_dev_outputs for e in edits]
    if any(p is None for p in probs):
        raise EditError("dev outputs must carry probabilities")
    grid = threshold_grid(max(probs, default=0.0), grid_step)
    rows = []
    for t in grid:
        hyp = [filter_edits(edits, t) for edits in merged_dev_outputs]
        s = score(hyp, gold, beta, key=key)
        rows.append((t, s.P, s.R, s.F))
    best_f = max(r[3] for r in rows)
    if best_f <= 0:
        best_t = grid[-1]
    else:
        best_t = next(r[0] for r in rows if r[3] == best_f)
    if csv_path:
        write_tuning_csv(rows, csv_path)
    return best_t, best_f, rows


def write_tuning_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "P", "R", "F0.5"])
        w.writerows(rows)
