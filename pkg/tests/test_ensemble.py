import random

import pytest

from redpen.edits import Edit, EditError
from redpen.ensemble import intersects, merge, threshold_grid, tune_threshold


def E(s, t, rep, p=None):
    return Edit(s, t, tuple(rep) if isinstance(rep, (list, tuple)) else (rep,), p)


def test_identical_edits_sum():
    out = merge([[E(2, 3, "the", 0.6)], [E(2, 3, "the", 0.5)]])
    assert [e.key for e in out] == [(2, 3, ("the",))]
    assert out[0].probability == pytest.approx(1.1)
    assert merge([[E(2, 3, "the", 0.6)], [E(2, 3, "the", 0.5)]], mode="mean")[0].probability == \
        pytest.approx(0.55)


def test_intersecting_keeps_most_probable():
    out = merge([[E(2, 4, "x", 0.7)], [E(3, 5, "y", 0.4)]])
    assert out == [E(2, 4, "x", 0.7)]


def test_disjoint_both_kept():
    out = merge([[E(1, 2, "a", 0.6)], [E(5, 6, "b", 0.9)]])
    assert out == [E(1, 2, "a", 0.6), E(5, 6, "b", 0.9)]


def test_intersects_rules():
    assert not intersects(E(1, 2, "a"), E(2, 3, "b"))
    assert intersects(E(1, 3, "a"), E(2, 2, "b"))
    assert not intersects(E(1, 3, "a"), E(3, 3, "b"))
    assert not intersects(E(1, 3, "a"), E(1, 1, "b"))
    assert intersects(E(2, 2, "a"), E(2, 2, "b"))


def test_errors():
    with pytest.raises(EditError, match="internal overlap"):
        merge([[E(1, 3, "a", 0.5), E(2, 4, "b", 0.5)]])
    with pytest.raises(EditError):
        merge([[E(1, 3, "a")]])
    with pytest.raises(ValueError):
        merge([], mode="max")


def random_model_edits(rng, n_source=12):
    out, pos = [], 1
    while pos <= n_source and len(out) < 4:
        start = rng.randint(pos, n_source)
        end = rng.randint(start, min(n_source, start + 2))
        if end == start and out and out[-1].is_insertion and out[-1].span_start == start:
            break
        rep = tuple(rng.choice("ab") for _ in range(rng.randint(0 if end > start else 1, 2)))
        out.append(Edit(start, end, rep, rng.choice([0.2, 0.4, 0.5, 0.7, 0.9])))
        pos = end + 1
    return out


def test_merge_laws_random():
    rng = random.Random(0)
    for _ in range(1000):
        models = [random_model_edits(rng) for _ in range(rng.randint(1, 4))]
        merged = merge(models)
        for a in merged:
            for b in merged:
                assert a is b or not intersects(a, b)
        shuffled = models[:]
        rng.shuffle(shuffled)
        assert merge(shuffled) == merged
        single = models[0]
        doubled = merge([single, single])
        assert [e.key for e in doubled] == [e.key for e in single]
        assert [e.probability for e in doubled] == pytest.approx([2 * e.probability for e in single])


def test_grid():
    g = threshold_grid(0.9)
    assert g[0] == 0 and g[-1] > 0.9 and 0.585 in g and 0.59 in g
    assert all(b > a for a, b in zip(g, g[1:]))
    with pytest.raises(ValueError):
        threshold_grid(1.0, 0)


def test_tune_all_correct_picks_zero(tmp_path):
    hyp = [[E(1, 2, "a", 0.3)], [E(2, 3, "b", 0.8)]]
    gold = [[E(1, 2, "a")], [E(2, 3, "b")]]
    t, f, rows = tune_threshold(hyp, gold, csv_path=tmp_path / "t.csv")
    assert t == 0 and f == 1.0
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "threshold,P,R,F0.5" and len(lines) == len(rows) + 1


def test_tune_all_wrong_accepts_nothing():
    hyp = [[E(1, 2, "a", 0.3)], [E(2, 3, "b", 0.8)]]
    gold = [[E(1, 2, "z")], []]
    t, f, _ = tune_threshold(hyp, gold)
    assert f == 0 and t > 0.8


def test_tune_smallest_maximizer():
    hyp = [[E(1, 2, "a", 0.9), E(4, 5, "x", 0.4)]]
    gold = [[E(1, 2, "a")]]
    t, f, rows = tune_threshold(hyp, gold)
    assert f == 1.0 and t == pytest.approx(0.405)
    with pytest.raises(ValueError):
        tune_threshold([], [])
