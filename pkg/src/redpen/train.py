"""Teacher-forcing targets, rule-based corruption, and staged training."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .edits import Edit, apply_edits, edits_to_stream, extract_edits
from .model import ModelConfig, ModelError, RedPenNet, loss_fn
from .tokenizer import EOS, PAD, SEP, SOS

log = logging.getLogger(__name__)

NO_SPAN = -1
OPS = ("substitute", "delete", "insert", "transpose")


@dataclass
class TrainingExample:
    source_ids: list[int]
    fed_tokens: list[int]
    fed_spans: list[int]
    target_tokens: list[int]
    target_spans: list[int]
    span_target_mask: list[int]
    gold_edits: list[Edit] = field(default_factory=list)


def make_targets(source_ids: Sequence[int], gold_edits: Sequence[Edit]) -> TrainingExample:
    """Teacher-forcing rows for one sentence; spans use -1 for "none"."""
    for e in gold_edits:
        if e.span_end > len(source_ids):
            raise ValueError(f"edit {e} out of range for source of length {len(source_ids)}")
    stream = edits_to_stream(list(gold_edits))
    tokens = list(stream.tokens)
    spans = [NO_SPAN if s is None else s for s in stream.spans]
    mask = [int(s is not None) for s in stream.spans]
    return TrainingExample(
        source_ids=list(source_ids),
        fed_tokens=[SOS] + tokens[:-1],
        fed_spans=[0] + spans[:-1],
        target_tokens=tokens,
        target_spans=spans,
        span_target_mask=mask,
        gold_edits=list(gold_edits),
    )


def synth_corrupt(clean_ids: Sequence[int], rng: np.random.Generator,
                  op_weights: dict[str, float] | None = None, n_ops: int = 1,
                  symbols: Sequence[int] | None = None):
    """Corrupt an SOS...EOS framed sequence with ``n_ops`` random operations.

    Returns (corrupted, gold_edits) with ``apply_edits(corrupted, gold) == clean``.
    ``symbols`` is the pool that substitutions and insertions draw from.
    """
    weights = op_weights or {op: 1.0 for op in OPS}
    names = [op for op in OPS if weights.get(op, 0) > 0]
    probs = np.array([weights[op] for op in names], dtype=float)
    probs /= probs.sum()
    pool = list(symbols) if symbols is not None else sorted(set(clean_ids[1:]) - {EOS})
    seq = list(clean_ids)
    closed = bool(seq) and seq[-1] == EOS
    for _ in range(n_ops):
        body = len(seq) - 1 - closed
        op = names[rng.choice(len(names), p=probs)]
        if op == "delete" and body < 2 or op == "transpose" and body < 2:
            op = "insert"
        if op == "substitute" and body >= 1:
            i = 1 + int(rng.integers(body))
            options = [s for s in pool if s != seq[i]]
            if options:
                seq[i] = options[int(rng.integers(len(options)))]
        elif op == "delete":
            i = 1 + int(rng.integers(body))
            del seq[i]
        elif op == "transpose":
            i = 1 + int(rng.integers(body - 1))
            seq[i], seq[i + 1] = seq[i + 1], seq[i]
        else:
            i = 1 + int(rng.integers(body + 1))
            seq.insert(i, pool[int(rng.integers(len(pool)))])
    gold = extract_edits(seq, clean_ids)
    return seq, gold


# -- toy language --------------------------------------------------------------

TOY_ALPHABET = 40


def toy_symbols() -> list[str]:
    return [f"w{i:02d}" for i in range(TOY_ALPHABET)]


def toy_sentence(rng: np.random.Generator, min_len: int = 5, max_len: int = 15) -> list[int]:
    """One clean sentence as symbol indices 0..39.

    The template is a run of consecutive symbols (mod 40) with a fixed stride of
    one, so any single corruption is locally visible.
    """
    n = int(rng.integers(min_len, max_len + 1))
    start = int(rng.integers(TOY_ALPHABET))
    return [(start + k) % TOY_ALPHABET for k in range(n)]


def toy_pairs(n: int, seed: int, n_ops: int = 1, clean_fraction: float = 0.0):
    """``n`` (corrupted_ids, clean_ids, gold_edits) over the toy vocabulary.

    Token ids are offset by the six specials.
    """
    rng = np.random.default_rng(seed)
    symbols = [6 + i for i in range(TOY_ALPHABET)]
    out = []
    for _ in range(n):
        clean = [SOS] + [6 + s for s in toy_sentence(rng)] + [EOS]
        k = 0 if rng.random() < clean_fraction else n_ops
        corrupted, gold = synth_corrupt(clean, rng, n_ops=k, symbols=symbols)
        out.append((corrupted, clean, gold))
    return out


# -- batching ------------------------------------------------------------------

def collate(examples: Sequence[TrainingExample], device="cpu"):
    """Pad a list of examples into the six tensors the model and loss consume."""
    B = len(examples)
    L = max(len(e.source_ids) for e in examples)
    N = max(len(e.target_tokens) for e in examples)
    x = torch.full((B, L), PAD, dtype=torch.long)
    ft = torch.full((B, N), PAD, dtype=torch.long)
    fs = torch.full((B, N), NO_SPAN, dtype=torch.long)
    tt = torch.full((B, N), PAD, dtype=torch.long)
    ts = torch.full((B, N), NO_SPAN, dtype=torch.long)
    sm = torch.zeros((B, N), dtype=torch.long)
    for b, e in enumerate(examples):
        x[b, :len(e.source_ids)] = torch.tensor(e.source_ids)
        n = len(e.target_tokens)
        ft[b, :n] = torch.tensor(e.fed_tokens)
        fs[b, :n] = torch.tensor(e.fed_spans)
        tt[b, :n] = torch.tensor(e.target_tokens)
        ts[b, :n] = torch.tensor(e.target_spans)
        sm[b, :n] = torch.tensor(e.span_target_mask)
    return tuple(t.to(device) for t in (x, ft, fs, tt, ts, sm))


def batch_accuracy(outputs, target_tokens, target_spans, span_target_mask):
    """(token correct, token count, span correct, span count) for one batch."""
    tok_pred = outputs.token_logits.argmax(-1)
    valid = target_tokens != PAD
    span_pred = outputs.span_logits.argmax(-1)
    m = span_target_mask.bool()
    return (int(((tok_pred == target_tokens) & valid).sum()), int(valid.sum()),
            int(((span_pred == target_spans) & m).sum()), int(m.sum()))


# -- training loop -------------------------------------------------------------

@dataclass
class StageConfig:
    name: str = "stage"
    data_mix: dict[str, float] = field(default_factory=lambda: {"synthetic": 1.0})
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout_override: float | None = None
    seed: int = 0
    max_steps: int | None = None
    epoch_size: int | None = None
    freeze_encoder: bool = False

    def __post_init__(self):
        total = sum(self.data_mix.values())
        if any(v < 0 for v in self.data_mix.values()) or not math.isclose(total, 1.0, abs_tol=1e-6):
            raise ValueError(f"data_mix proportions must be non-negative and sum to 1, got {total}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive, learning_rate non-negative")


def load_stages(path) -> list[StageConfig]:
    return [StageConfig(**rec) for rec in json.loads(Path(path).read_text("utf-8"))]


METRIC_FIELDS = ("epoch", "stage", "loss", "tok_acc", "span_acc", "dev_P", "dev_R", "dev_F05")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, model, log_rows):
        super().__init__(msg)
        self.model = model
        self.log_rows = log_rows


def _epoch_examples(stage: StageConfig, data: dict[str, list], rng: np.random.Generator):
    pools = {k: data.get(k, []) for k, w in stage.data_mix.items() if w > 0}
    for k, pool in pools.items():
        if not pool:
            raise ValueError(f"stage {stage.name!r}: data pool {k!r} is empty")
    size = stage.epoch_size or sum(len(p) for p in pools.values())
    picked = []
    for k, pool in pools.items():
        count = int(round(stage.data_mix[k] * size))
        if count <= len(pool):
            idx = rng.permutation(len(pool))[:count]
        else:
            idx = rng.integers(len(pool), size=count)
        picked.extend(pool[i] for i in idx)
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def _set_dropout(model: RedPenNet, rate: float) -> None:
    for m in model.modules():
        if isinstance(m, torch.nn.Dropout):
            m.p = rate


def train_loop(config: ModelConfig | RedPenNet, stages: Sequence[StageConfig],
               data: dict[str, list[TrainingExample]],
               dev_eval: Callable[[RedPenNet], tuple[float, float, float]] | None = None,
               metrics_path=None, checkpoint_path=None, clip_norm: float = 1.0):
    """Run the stages in order with Adam; return (best model, metric rows).

    ``data`` maps pool names ("erroneous", "error-free", "synthetic") to
    examples.  ``dev_eval`` returns (P, R, F0.5) and picks the checkpoint;
    without it the final parameters are returned.
    """
    torch.set_num_threads(1)
    model = config if isinstance(config, RedPenNet) else RedPenNet(config)
    rows: list[dict] = []
    best_f = -1.0
    best_state = copy.deepcopy(model.state_dict())
    last_good = best_state
    step = 0
    epoch_no = 0
    for stage in stages:
        torch.manual_seed(stage.seed)
        rng = np.random.default_rng(stage.seed)
        base_dropout = model.cfg.dropout
        _set_dropout(model, base_dropout if stage.dropout_override is None else stage.dropout_override)
        for p in model.parameters():
            p.requires_grad_(True)
        if stage.freeze_encoder:
            for mod in (model.enc_tok, model.enc_pos, model.encoder, model.enc_norm):
                for p in mod.parameters():
                    p.requires_grad_(False)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=stage.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        stage_steps = 0
        for _ in range(stage.epochs):
            if stage.max_steps is not None and stage_steps >= stage.max_steps:
                break
            epoch_no += 1
            model.train()
            examples = _epoch_examples(stage, data, rng)
            tot_loss = 0.0
            batches = 0
            tc = tn = sc = sn = 0
            for b in range(0, len(examples), stage.batch_size):
                if stage.max_steps is not None and stage_steps >= stage.max_steps:
                    break
                x, ft, fs, tt, ts, sm = collate(examples[b:b + stage.batch_size])
                out = model(x, ft, fs)
                loss, _, _ = loss_fn(out, tt, ts, sm)
                if not torch.isfinite(loss):
                    model.load_state_dict(last_good)
                    raise TrainingAborted(f"non-finite loss at step {step}", model, rows)
                if stage.learning_rate > 0:
                    opt.zero_grad()
                    loss.backward()
                    torch.nn.utils.clip_grad_norm_(params, clip_norm)
                    opt.step()
                step += 1
                stage_steps += 1
                batches += 1
                tot_loss += loss.item()
                a, b_, c, d = batch_accuracy(out, tt, ts, sm)
                tc, tn, sc, sn = tc + a, tn + b_, sc + c, sn + d
            last_good = copy.deepcopy(model.state_dict())
            row = {"epoch": epoch_no, "stage": stage.name, "step": step,
                   "loss": tot_loss / max(batches, 1),
                   "tok_acc": tc / tn if tn else 0.0,
                   "span_acc": sc / sn if sn else 0.0,
                   "dev_P": "", "dev_R": "", "dev_F05": ""}
            if dev_eval is not None:
                model.eval()
                p, r, f = dev_eval(model)
                row.update(dev_P=p, dev_R=r, dev_F05=f)
                if f > best_f:
                    best_f = f
                    best_state = copy.deepcopy(model.state_dict())
                    if checkpoint_path:
                        model.save(checkpoint_path)
            log.info("epoch %d %s step %d loss %.4f tok %.3f span %.3f F0.5 %s", epoch_no,
                     stage.name, step, row["loss"], row["tok_acc"], row["span_acc"], row["dev_F05"])
            rows.append(row)
        _set_dropout(model, base_dropout)
    if dev_eval is not None:
        model.load_state_dict(best_state)
    elif checkpoint_path:
        model.save(checkpoint_path)
    model.eval()
    if metrics_path:
        write_metrics(rows, metrics_path)
    return model, rows


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
