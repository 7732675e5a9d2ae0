import json

import numpy as np
import pytest
import torch

from redpen.edits import Edit, apply_edits, stream_to_edits, EditStream
from redpen.model import ModelConfig, RedPenNet
from redpen.tokenizer import DEL, EOS, SEP, SOS
from redpen.train import (METRIC_FIELDS, NO_SPAN, StageConfig, TrainingAborted, load_stages,
                          make_targets, synth_corrupt, toy_pairs, train_loop, write_metrics)

ON, THE, COMMA = 100, 101, 102


def test_make_targets_table2(table1_source):
    src = list(range(len(table1_source)))
    ex = make_targets(src, [Edit(1, 3, (ON, THE)), Edit(5, 5, (COMMA,)), Edit(6, 7, ())])
    assert ex.fed_tokens == [SOS, SEP, ON, THE, SEP, COMMA, SEP, DEL]
    assert ex.fed_spans == [0, 1, 3, NO_SPAN, 5, 5, 6, 7]
    assert ex.target_tokens == [SEP, ON, THE, SEP, COMMA, SEP, DEL, EOS]
    assert ex.target_spans == [1, 3, NO_SPAN, 5, 5, 6, 7, NO_SPAN]
    assert ex.span_target_mask == [1, 1, 0, 1, 1, 1, 1, 0]
    spans = [None if s == NO_SPAN else s for s in ex.target_spans]
    assert stream_to_edits(EditStream(ex.target_tokens, spans)) == ex.gold_edits


def test_make_targets_trivial():
    ex = make_targets([SOS, 7, EOS], [])
    assert (ex.target_tokens, ex.fed_tokens, ex.span_target_mask) == ([EOS], [SOS], [0])
    ex = make_targets([SOS, 7, EOS], [Edit(1, 2, ())])
    assert ex.target_tokens == [SEP, DEL, EOS]
    assert ex.span_target_mask == [1, 1, 0]
    with pytest.raises(ValueError):
        make_targets([SOS, 7], [Edit(1, 4, ())])


def test_synth_corrupt_zero_ops():
    clean = [SOS, 6, 7, 8, EOS]
    assert synth_corrupt(clean, np.random.default_rng(0), n_ops=0) == (clean, [])


def test_synth_corrupt_substitution():
    clean = [SOS, 6, 7, 8, EOS]
    rng = np.random.default_rng(0)
    for _ in range(20):
        bad, gold = synth_corrupt(clean, rng, {"substitute": 1.0}, symbols=range(6, 20))
        (i,) = [k for k in range(len(clean)) if bad[k] != clean[k]]
        assert gold == [Edit(i, i + 1, (clean[i],))]


def test_synth_corrupt_restores_clean():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(0, 8))
        clean = [SOS] + [int(t) for t in rng.integers(6, 12, size=n)] + [EOS]
        bad, gold = synth_corrupt(clean, rng, n_ops=int(rng.integers(0, 4)), symbols=range(6, 12))
        assert bad[0] == SOS and bad[-1] == EOS
        assert apply_edits(bad, gold) == clean


def test_toy_pairs_shape():
    pairs = toy_pairs(50, seed=0)
    assert pairs == toy_pairs(50, seed=0)
    for bad, clean, gold in pairs:
        assert 7 <= len(clean) <= 17
        assert all(6 <= t < 46 for t in clean[1:-1])
        assert apply_edits(bad, gold) == clean
        assert gold
    assert sum(not g for _, _, g in toy_pairs(200, seed=1, clean_fraction=0.5)) > 50


def _data(n=32, seed=0):
    return {"synthetic": [make_targets(b, g) for b, _, g in toy_pairs(n, seed)]}


CFG = ModelConfig(enc_vocab=46, dec_vocab=46, d_model=16, heads=2, enc_layers=1, dec_layers=1,
                  max_src_len=24, max_tgt_len=16, dropout=0.0)


def test_stage_validation(tmp_path):
    with pytest.raises(ValueError):
        StageConfig(data_mix={"erroneous": 0.5, "synthetic": 0.4})
    with pytest.raises(ValueError):
        StageConfig(batch_size=0)
    p = tmp_path / "stages.json"
    p.write_text(json.dumps([{"name": "pre", "data_mix": {"synthetic": 1.0}, "epochs": 2},
                             {"name": "fine", "data_mix": {"erroneous": 0.7, "error-free": 0.3}}]))
    stages = load_stages(p)
    assert [s.name for s in stages] == ["pre", "fine"]
    with pytest.raises(ValueError, match="empty"):
        train_loop(CFG, stages[1:], _data())


def test_zero_learning_rate_is_identity():
    model = RedPenNet(CFG)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    model, rows = train_loop(model, [StageConfig(learning_rate=0.0, epochs=2)], _data())
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert len(rows) == 2


def test_two_stage_runs_are_identical(tmp_path):
    stages = [StageConfig("a", epochs=2, batch_size=8, seed=1),
              StageConfig("b", epochs=1, batch_size=4, seed=2, learning_rate=5e-4)]
    _, r1 = train_loop(RedPenNet(CFG), stages, _data(), metrics_path=tmp_path / "m1.csv")
    _, r2 = train_loop(RedPenNet(CFG), stages, _data(), metrics_path=tmp_path / "m2.csv")
    assert r1 == r2
    text = (tmp_path / "m1.csv").read_text()
    assert text == (tmp_path / "m2.csv").read_text()
    assert text.splitlines()[0] == ",".join(METRIC_FIELDS)
    assert [r["stage"] for r in r1] == ["a", "a", "b"]


def test_memorization_reaches_full_accuracy():
    data = _data(32)
    _, rows = train_loop(CFG, [StageConfig(epochs=300, batch_size=32, learning_rate=1e-2)], data)
    assert rows[-1]["tok_acc"] == 1.0
    assert rows[-1]["loss"] < rows[0]["loss"]


def test_best_dev_checkpoint_is_restored(tmp_path):
    scores = iter([0.2, 0.9, 0.1])
    seen = []

    def dev_eval(m):
        seen.append({k: v.clone() for k, v in m.state_dict().items()})
        f = next(scores)
        return f, f, f

    model, rows = train_loop(CFG, [StageConfig(epochs=3, batch_size=16)], _data(),
                             dev_eval=dev_eval, checkpoint_path=tmp_path / "best.bin")
    assert all(torch.equal(seen[1][k], v) for k, v in model.state_dict().items())
    assert [r["dev_F05"] for r in rows] == [0.2, 0.9, 0.1]
    reloaded = RedPenNet.load(tmp_path / "best.bin")
    assert all(torch.allclose(seen[1][k], v) for k, v in reloaded.state_dict().items())


def test_nan_loss_aborts_with_last_good():
    model = RedPenNet(CFG)
    with torch.no_grad():
        model.out_proj.bias[0] = float("nan")
    with pytest.raises(TrainingAborted) as info:
        train_loop(model, [StageConfig()], _data())
    assert "non-finite" in str(info.value)
    assert info.value.model is model


def test_write_metrics_blank_dev(tmp_path):
    write_metrics([{"epoch": 1, "stage": "s", "loss": 0.5, "tok_acc": 1, "span_acc": 1,
                    "dev_P": "", "dev_R": "", "dev_F05": "", "step": 3}], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "1,s,0.5,1,1,,,"
